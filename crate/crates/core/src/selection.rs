//! Prediction selection: split raw detections into safe predictions, unsafe
//! predictions and discards.
//!
//! A detection whose IoU with any human label of the same image exceeds
//! `dedup_iou` is discarded first, whatever its category. The remaining ones
//! are bucketed by score: `score <= low` is discarded, `score > high` is safe,
//! everything in between is unsafe.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::annotations::{iou, Category, Dataset, DetectionSet, Instance, Provenance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub threshold_low: f64,
    pub threshold_high: f64,
    /// Per-category `(low, high)` overrides keyed by canonical name.
    pub per_category: BTreeMap<String, (f64, f64)>,
    pub dedup_iou: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig { threshold_low: 0.2, threshold_high: 0.9, per_category: BTreeMap::new(), dedup_iou: 0.7 }
    }
}

impl SelectionConfig {
    pub fn with_thresholds(low: f64, high: f64) -> Self {
        SelectionConfig { threshold_low: low, threshold_high: high, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |what: &str, low: f64, high: f64| {
            if (0.0..=1.0).contains(&low) && (0.0..=1.0).contains(&high) && low < high {
                Ok(())
            } else {
                Err(Error::Config(format!("{what}: thresholds must satisfy 0 <= low < high <= 1, got ({low}, {high})")))
            }
        };
        check("default", self.threshold_low, self.threshold_high)?;
        for (name, &(low, high)) in &self.per_category {
            check(name, low, high)?;
        }
        if !(self.dedup_iou > 0.0 && self.dedup_iou <= 1.0) {
            return Err(Error::Config(format!("dedup_iou must be in (0, 1], got {}", self.dedup_iou)));
        }
        Ok(())
    }

    /// Effective `(low, high)` for a category name.
    pub fn thresholds_for(&self, name: &str) -> (f64, f64) {
        self.per_category.get(name).copied().unwrap_or((self.threshold_low, self.threshold_high))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketCounts {
    pub safe: usize,
    #[serde(rename = "unsafe")]
    pub unsafe_: usize,
    pub discarded_low: usize,
    pub discarded_dedup: usize,
}

impl BucketCounts {
    pub fn total(&self) -> usize {
        self.safe + self.unsafe_ + self.discarded_low + self.discarded_dedup
    }

    fn add(&mut self, other: &BucketCounts) {
        self.safe += other.safe;
        self.unsafe_ += other.unsafe_;
        self.discarded_low += other.discarded_low;
        self.discarded_dedup += other.discarded_dedup;
    }
}

/// Selection statistics, serialized as the selection-stats JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    #[serde(flatten)]
    pub totals: BucketCounts,
    pub per_category: BTreeMap<String, BucketCounts>,
}

impl SelectionStats {
    pub fn merge(&mut self, other: &SelectionStats) {
        self.totals.add(&other.totals);
        for (name, counts) in &other.per_category {
            self.per_category.entry(name.clone()).or_default().add(counts);
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelectionResult {
    pub safe: Vec<Instance>,
    pub unsafe_: Vec<Instance>,
    pub discarded_low: usize,
    pub discarded_dedup: usize,
    pub stats: SelectionStats,
}

impl SelectionResult {
    /// Safe and unsafe predictions in input order.
    pub fn selected(&self) -> Vec<Instance> {
        let mut all: Vec<Instance> = self.safe.iter().chain(&self.unsafe_).cloned().collect();
        all.sort_by_key(|i| i.id);
        all
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bucket {
    Safe,
    Unsafe,
    DiscardedLow,
}

/// Score bucketing with the strict `>` for safe and `<=` for discard.
pub fn bucket(score: f64, low: f64, high: f64) -> Bucket {
    if score <= low {
        Bucket::DiscardedLow
    } else if score > high {
        Bucket::Safe
    } else {
        Bucket::Unsafe
    }
}

/// Selects predictions for the images of `target`.
///
/// `categories` is the taxonomy the detections are expressed in; it is used
/// for referential checks and per-category threshold overrides. Selected
/// instances keep that taxonomy's category ids and receive instance ids
/// following the largest id already used in `target`, in input order.
pub fn select(
    detections: &DetectionSet,
    categories: &[Category],
    target: &Dataset,
    cfg: &SelectionConfig,
) -> Result<SelectionResult> {
    cfg.validate()?;
    let detections = detections.resolve(categories, &target.images)?;
    let names: BTreeMap<u64, &str> = categories.iter().map(|c| (c.id, c.name.as_str())).collect();

    let mut gt_by_image: BTreeMap<u64, Vec<&Instance>> = BTreeMap::new();
    for inst in target.ground_truth() {
        gt_by_image.entry(inst.image_id).or_default().push(inst);
    }

    let mut result = SelectionResult::default();
    for name in names.values() {
        result.stats.per_category.insert(name.to_string(), BucketCounts::default());
    }
    let mut next_id = target.next_instance_id();

    for det in &detections.detections {
        let name = names[&det.category_id];
        let counts = result.stats.per_category.get_mut(name).expect("category registered");

        let duplicate = gt_by_image
            .get(&det.image_id)
            .is_some_and(|gts| gts.iter().any(|g| iou(&g.bbox, &det.bbox) > cfg.dedup_iou));
        if duplicate {
            counts.discarded_dedup += 1;
            result.discarded_dedup += 1;
            continue;
        }

        let (low, high) = cfg.thresholds_for(name);
        let provenance = match bucket(det.score, low, high) {
            Bucket::DiscardedLow => {
                counts.discarded_low += 1;
                result.discarded_low += 1;
                continue;
            }
            Bucket::Safe => {
                counts.safe += 1;
                Provenance::safe(det.score)
            }
            Bucket::Unsafe => {
                counts.unsafe_ += 1;
                Provenance::unsafe_prediction(det.score)
            }
        };
        let inst =
            Instance { id: next_id, image_id: det.image_id, category_id: det.category_id, bbox: det.bbox, provenance };
        next_id += 1;
        if provenance.kind == crate::annotations::ProvenanceKind::SafePrediction {
            result.safe.push(inst);
        } else {
            result.unsafe_.push(inst);
        }
    }

    result.stats.totals = BucketCounts {
        safe: result.safe.len(),
        unsafe_: result.unsafe_.len(),
        discarded_low: result.discarded_low,
        discarded_dedup: result.discarded_dedup,
    };
    tracing::debug!(
        safe = result.safe.len(),
        unsafe_ = result.unsafe_.len(),
        low = result.discarded_low,
        dedup = result.discarded_dedup,
        "selection done"
    );
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::{BBox, Detection, Image};

    fn scene() -> (Dataset, Vec<Category>) {
        let target = Dataset {
            images: vec![Image::new(1, 200, 200, "a")],
            categories: vec![Category::new(1, "dress")],
            instances: vec![Instance {
                id: 10,
                image_id: 1,
                category_id: 1,
                bbox: BBox::new(0.0, 0.0, 100.0, 100.0).unwrap(),
                provenance: Provenance::GROUND_TRUTH,
            }],
        };
        (target, vec![Category::new(1, "car"), Category::new(2, "truck")])
    }

    fn det(x: f64, score: f64) -> Detection {
        Detection { image_id: 1, category_id: 1, bbox: BBox::new(x, 0.0, 100.0, 100.0).unwrap(), score }
    }

    fn run(dets: Vec<Detection>) -> SelectionResult {
        let (target, cats) = scene();
        select(&DetectionSet::new(dets), &cats, &target, &SelectionConfig::default()).unwrap()
    }

    #[test]
    fn score_buckets() {
        // x = 100 gives zero overlap with the labeled box
        assert_eq!(run(vec![det(100.0, 0.15)]).discarded_low, 1);
        assert_eq!(run(vec![det(100.0, 0.95)]).safe.len(), 1);
        assert_eq!(run(vec![det(100.0, 0.55)]).unsafe_.len(), 1);
    }

    #[test]
    fn high_overlap_with_ground_truth_is_discarded() {
        // shift by 100/9 gives inter 8/9, union 10/9 of the box area: IoU 0.8
        let shifted = det(100.0 / 9.0, 0.95);
        let (target, _) = scene();
        let overlap = iou(&shifted.bbox, &target.instances[0].bbox);
        assert!((overlap - 0.8).abs() < 1e-12);
        let r = run(vec![shifted]);
        assert_eq!(r.discarded_dedup, 1);
        assert!(r.safe.is_empty());
    }

    #[test]
    fn boundaries_are_exact() {
        let r = run(vec![det(100.0, 0.2), det(100.0, 0.9)]);
        assert_eq!(r.discarded_low, 1);
        assert_eq!(r.unsafe_.len(), 1);
        assert_eq!(r.unsafe_[0].provenance.score, Some(0.9));
    }

    #[test]
    fn per_category_override_applies() {
        let (target, cats) = scene();
        let mut cfg = SelectionConfig::default();
        cfg.per_category.insert("truck".into(), (0.5, 0.6));
        let mut d = det(100.0, 0.55);
        d.category_id = 2;
        let r = select(&DetectionSet::new(vec![d, det(100.0, 0.55)]), &cats, &target, &cfg).unwrap();
        assert_eq!(r.unsafe_.len(), 2);
        let mut d = det(100.0, 0.65);
        d.category_id = 2;
        let r = select(&DetectionSet::new(vec![d]), &cats, &target, &cfg).unwrap();
        assert_eq!(r.safe.len(), 1);
        assert_eq!(r.stats.per_category["truck"].safe, 1);
    }

    #[test]
    fn unknown_image_is_an_error() {
        let mut d = det(100.0, 0.5);
        d.image_id = 42;
        let (target, cats) = scene();
        let err = select(&DetectionSet::new(vec![d]), &cats, &target, &SelectionConfig::default());
        assert!(matches!(err, Err(Error::Reference { id: 42, .. })));
    }

    #[test]
    fn ids_follow_target_and_input_order() {
        let r = run(vec![det(100.0, 0.95), det(100.0, 0.5), det(100.0, 0.99)]);
        let ids: Vec<u64> = r.selected().iter().map(|i| i.id).collect();
        assert_eq!(ids, vec![11, 12, 13]);
        assert_eq!(r.safe[1].provenance.score, Some(0.99));
    }

    #[test]
    fn invalid_thresholds_rejected() {
        assert!(SelectionConfig::with_thresholds(0.9, 0.2).validate().is_err());
        assert!(SelectionConfig { dedup_iou: 0.0, ..Default::default() }.validate().is_err());
    }
}
