//! Merging of object detection datasets with disjoint or partially shared
//! label spaces.
//!
//! Each dataset is enriched with the other side's detector predictions,
//! split into safe and unsafe pseudo-labels by score. Training targets and
//! the SoftSig loss treat unsafe pseudo-labels as "object of unknown class
//! reliability", never as background.

pub mod annotations;
pub mod assignment;
pub mod error;
pub mod gradcheck;
pub mod merging;
pub mod metrics;
pub mod seed;
pub mod selection;
pub mod simulator;
pub mod softsig;

pub use error::{Error, Result};
