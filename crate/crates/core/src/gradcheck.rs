//! Finite-difference verification of [`softsig_gradient`].
//!
//! Only [`softsig_loss`] is evaluated here; the analytic gradient is compared
//! against central differences of the loss.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::Result;
use crate::softsig::{softsig_gradient, softsig_loss, LossBatch};

/// Random batch consistent with ROI targets: roughly one row in four is
/// matched to an unsafe prediction.
pub fn random_batch<R: Rng>(rng: &mut R, max_rows: usize, max_categories: usize, logit_sd: f64) -> LossBatch {
    let rows = rng.random_range(1..=max_rows);
    let categories = rng.random_range(1..=max_categories);
    let cols = categories + 1;
    let normal = Normal::new(0.0, logit_sd).expect("valid sd");

    let logits = Array2::from_shape_fn((rows, cols), |_| normal.sample(rng));
    let mut targets = Array2::zeros((rows, cols));
    let mut masks = Array1::ones(rows);
    let mut weights = Array2::ones((rows, cols));
    for r in 0..rows {
        if rng.random_bool(0.25) {
            let c = rng.random_range(0..categories);
            targets[[r, categories]] = 1.0;
            masks[r] = 0.0;
            weights[[r, c]] = 0.0;
            weights[[r, categories]] = 0.0;
        } else {
            targets[[r, rng.random_range(0..cols)]] = 1.0;
        }
    }
    let lambda = if rng.random_bool(0.5) { 1.0 } else { rng.random_range(0.1..2.0) };
    LossBatch::new(logits, targets, masks, weights, lambda).expect("generated batch is valid")
}

/// Central differences of [`softsig_loss`] with step `h`.
pub fn central_difference(b: &LossBatch, h: f64) -> Result<Array2<f64>> {
    let base = b.logits().clone();
    let mut out = Array2::zeros(base.dim());
    for ((r, c), slot) in out.indexed_iter_mut() {
        let mut plus = base.clone();
        plus[[r, c]] += h;
        let mut minus = base.clone();
        minus[[r, c]] -= h;
        let fp = softsig_loss(&b.with_logits(plus)?)?;
        let fm = softsig_loss(&b.with_logits(minus)?)?;
        *slot = (fp - fm) / (2.0 * h);
    }
    Ok(out)
}

/// `|a - n| / max(|a|, |n|)`, zero when both are zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

pub fn max_relative_error(b: &LossBatch, h: f64) -> Result<f64> {
    let analytic = softsig_gradient(b)?;
    let numeric = central_difference(b, h)?;
    Ok(analytic.iter().zip(numeric.iter()).map(|(&a, &n)| relative_error(a, n)).fold(0.0, f64::max))
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub trials: usize,
    pub step: f64,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

/// Gradient check over `trials` random batches (R ≤ 8, C ≤ 5, logits ~ N(0, 2)).
pub fn run(seed: u64, trials: usize, tolerance: f64) -> Result<GradcheckReport> {
    let mut rng = crate::seed::rng_for(seed, 0, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let b = random_batch(&mut rng, 8, 5, 2.0);
        worst = worst.max(max_relative_error(&b, DEFAULT_STEP)?);
    }
    Ok(GradcheckReport {
        seed,
        trials,
        step: DEFAULT_STEP,
        max_relative_error: worst,
        tolerance,
        passed: worst < tolerance,
    })
}
