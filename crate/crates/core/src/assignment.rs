//! Anchor labeling for the RPN, ROI target construction for the box
//! classifier, and minibatch sampling.
//!
//! Unsafe predictions never produce positives or negatives: anchors touching
//! them are `Undefined`, and ROIs matched to them get `mask = 0` plus zero
//! binary weights at their category and at background.

use serde::{Deserialize, Serialize};

use crate::annotations::{iou, BBox, Category, Instance, ProvenanceKind};
use crate::error::{Error, Result};
use crate::seed::{rng_for, STREAM_SAMPLING};

/// Whether ROIs matched to unsafe predictions can be drawn into the
/// background share of a box-classifier batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnsafeSampling {
    Pooled,
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssignConfig {
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub roi_pos_iou: f64,
    pub undefined_iou: f64,
    pub rpn_batch: usize,
    pub roi_batch: usize,
    pub roi_pos_fraction: f64,
    pub rpn_pos_fraction: f64,
    pub unsafe_sampling: UnsafeSampling,
    pub seed: u64,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            roi_pos_iou: 0.5,
            undefined_iou: 0.3,
            rpn_batch: 256,
            roi_batch: 124,
            roi_pos_fraction: 0.25,
            rpn_pos_fraction: 0.5,
            unsafe_sampling: UnsafeSampling::Pooled,
            seed: 3,
        }
    }
}

impl AssignConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !(self.rpn_neg_iou > 0.0 && self.rpn_neg_iou <= self.rpn_pos_iou && self.rpn_pos_iou <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 < rpn_neg_iou <= rpn_pos_iou <= 1, got {} / {}",
                self.rpn_neg_iou, self.rpn_pos_iou
            )));
        }
        if !unit(self.roi_pos_iou) || !unit(self.undefined_iou) {
            return Err(Error::Config("roi_pos_iou and undefined_iou must be in (0, 1]".into()));
        }
        if !open(self.roi_pos_fraction) || !open(self.rpn_pos_fraction) {
            return Err(Error::Config("positive fractions must be in (0, 1)".into()));
        }
        if self.rpn_batch == 0 || self.roi_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorLabel {
    Positive,
    Negative,
    Undefined,
}

fn max_iou<'a>(b: &BBox, instances: impl Iterator<Item = &'a Instance>) -> f64 {
    instances.map(|i| iou(b, &i.bbox)).fold(0.0, f64::max)
}

/// Labels anchors against the instances of one image.
pub fn assign_anchors(anchors: &[BBox], instances: &[Instance], cfg: &AssignConfig) -> Vec<AnchorLabel> {
    anchors
        .iter()
        .map(|a| {
            let trusted = max_iou(a, instances.iter().filter(|i| i.provenance.kind.is_trusted()));
            if trusted >= cfg.rpn_pos_iou {
                return AnchorLabel::Positive;
            }
            let unsafe_ =
                max_iou(a, instances.iter().filter(|i| i.provenance.kind == ProvenanceKind::UnsafePrediction));
            if unsafe_ >= cfg.undefined_iou {
                AnchorLabel::Undefined
            } else if trusted < cfg.rpn_neg_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Undefined
            }
        })
        .collect()
}

/// Classification target of one ROI. Columns `0..C` follow the taxonomy
/// sorted by id; column `C` is background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiTarget {
    pub class_index: usize,
    pub mask: u8,
    pub weights: Vec<u8>,
    pub regression_valid: bool,
    pub matched_instance: Option<u64>,
    pub matched_kind: Option<ProvenanceKind>,
    pub matched_iou: f64,
}

impl RoiTarget {
    /// Foreground ROI matched to a ground truth or safe prediction.
    pub fn is_positive(&self) -> bool {
        self.matched_kind.is_some_and(ProvenanceKind::is_trusted)
    }

    pub fn is_unsafe(&self) -> bool {
        self.matched_kind == Some(ProvenanceKind::UnsafePrediction)
    }

    pub fn is_background(&self) -> bool {
        self.matched_kind.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiTargets {
    pub num_categories: usize,
    /// Category id of each non-background column.
    pub columns: Vec<u64>,
    pub rois: Vec<RoiTarget>,
}

impl RoiTargets {
    pub fn background_index(&self) -> usize {
        self.num_categories
    }
}

/// Matches each ROI to its highest-IoU instance with IoU ≥ `roi_pos_iou`
/// (ties go to the lowest instance id) and builds class targets, the
/// categorical mask and the per-category binary weights.
pub fn assign_rois(
    rois: &[BBox],
    instances: &[Instance],
    categories: &[Category],
    cfg: &AssignConfig,
) -> Result<RoiTargets> {
    let mut columns: Vec<u64> = categories.iter().map(|c| c.id).collect();
    columns.sort_unstable();
    let num_categories = columns.len();
    let background = num_categories;

    let mut ordered: Vec<&Instance> = instances.iter().collect();
    ordered.sort_by_key(|i| i.id);

    let mut out = Vec::with_capacity(rois.len());
    for roi in rois {
        let mut best: Option<(&Instance, f64)> = None;
        for inst in &ordered {
            let v = iou(roi, &inst.bbox);
            if v >= cfg.roi_pos_iou && best.is_none_or(|(_, b)| v > b) {
                best = Some((inst, v));
            }
        }

        let mut weights = vec![1u8; num_categories + 1];
        let target = match best {
            None => RoiTarget {
                class_index: background,
                mask: 1,
                weights,
                regression_valid: false,
                matched_instance: None,
                matched_kind: None,
                matched_iou: 0.0,
            },
            Some((inst, v)) => {
                let column = columns
                    .binary_search(&inst.category_id)
                    .map_err(|_| Error::UnknownCategory(format!("category id {}", inst.category_id)))?;
                let kind = inst.provenance.kind;
                if kind == ProvenanceKind::UnsafePrediction {
                    weights[column] = 0;
                    weights[background] = 0;
                    RoiTarget {
                        class_index: background,
                        mask: 0,
                        weights,
                        regression_valid: false,
                        matched_instance: Some(inst.id),
                        matched_kind: Some(kind),
                        matched_iou: v,
                    }
                } else {
                    RoiTarget {
                        class_index: column,
                        mask: 1,
                        weights,
                        regression_valid: true,
                        matched_instance: Some(inst.id),
                        matched_kind: Some(kind),
                        matched_iou: v,
                    }
                }
            }
        };
        out.push(target);
    }
    Ok(RoiTargets { num_categories, columns, rois: out })
}

/// Indices drawn for one minibatch, each list sorted ascending.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSample {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl BatchSample {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn indices(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.positives.iter().chain(&self.negatives).copied().collect();
        all.sort_unstable();
        all
    }
}

fn positive_quota(batch: usize, fraction: f64) -> usize {
    let q = batch as f64 * fraction;
    if (q - q.round()).abs() < 1e-9 {
        q.round() as usize
    } else {
        q.ceil() as usize
    }
}

fn draw(pool: &[usize], n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    picked
}

fn sample_buckets(
    positives: &[usize],
    negatives: &[usize],
    batch: usize,
    fraction: f64,
    seed: u64,
    what: &str,
) -> Result<BatchSample> {
    if positives.is_empty() && negatives.is_empty() {
        return Err(Error::NoEligible(format!("no eligible {what} to sample")));
    }
    let mut n_pos = positives.len().min(positive_quota(batch, fraction));
    let n_neg = negatives.len().min(batch - n_pos);
    if n_pos + n_neg < batch {
        n_pos = positives.len().min(batch - n_neg);
    }
    let mut rng = rng_for(seed, STREAM_SAMPLING, 0);
    let pos = draw(positives, n_pos, &mut rng);
    let neg = draw(negatives, n_neg, &mut rng);
    Ok(BatchSample { positives: pos, negatives: neg })
}

/// RPN minibatch: positives up to `rpn_pos_fraction`, the rest negatives.
/// Undefined anchors are never drawn.
pub fn sample_rpn(labels: &[AnchorLabel], cfg: &AssignConfig, seed: u64) -> Result<BatchSample> {
    let pick = |want| labels.iter().enumerate().filter(|(_, l)| **l == want).map(|(i, _)| i).collect::<Vec<_>>();
    sample_buckets(
        &pick(AnchorLabel::Positive),
        &pick(AnchorLabel::Negative),
        cfg.rpn_batch,
        cfg.rpn_pos_fraction,
        seed,
        "anchors",
    )
}

/// Box-classifier minibatch: positives up to `roi_pos_fraction`, the rest
/// drawn from background ROIs, pooled with unsafe-matched ROIs unless
/// `unsafe_sampling` is `Excluded`.
pub fn sample_rois(targets: &RoiTargets, cfg: &AssignConfig, seed: u64) -> Result<BatchSample> {
    let mut positives = Vec::new();
    let mut rest = Vec::new();
    for (i, t) in targets.rois.iter().enumerate() {
        if t.is_positive() {
            positives.push(i);
        } else if t.is_background() || cfg.unsafe_sampling == UnsafeSampling::Pooled {
            rest.push(i);
        }
    }
    sample_buckets(&positives, &rest, cfg.roi_batch, cfg.roi_pos_fraction, seed, "ROIs")
}

/// Regular anchor grid centred on `stride` cells, clipped to the image.
pub fn anchor_grid(width: f64, height: f64, stride: f64, sizes: &[f64], ratios: &[f64]) -> Vec<BBox> {
    let mut out = Vec::new();
    let (nx, ny) = ((width / stride).ceil() as usize, (height / stride).ceil() as usize);
    for gy in 0..ny {
        for gx in 0..nx {
            let cx = (gx as f64 + 0.5) * stride;
            let cy = (gy as f64 + 0.5) * stride;
            for &size in sizes {
                for &ratio in ratios {
                    let w = size / ratio.sqrt();
                    let h = size * ratio.sqrt();
                    let b = BBox { x: cx - w / 2.0, y: cy - h / 2.0, w, h };
                    if let Some(b) = b.clamp_to(width, height) {
                        out.push(b);
                    }
                }
            }
        }
    }
    out
}

/// Per-image record of anchors, labels, ROI targets and sampled batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentDump {
    pub image_id: u64,
    pub anchors: Vec<BBox>,
    pub anchor_labels: Vec<AnchorLabel>,
    pub rpn_sample: Option<BatchSample>,
    pub rois: Vec<BBox>,
    pub roi_targets: RoiTargets,
    pub roi_sample: Option<BatchSample>,
}

/// Runs assignment and sampling for one image. The sampling seed is split
/// from `cfg.seed` by image id. Images with nothing eligible get no sample.
pub fn assign_image(
    image_id: u64,
    anchors: Vec<BBox>,
    rois: Vec<BBox>,
    instances: &[Instance],
    categories: &[Category],
    cfg: &AssignConfig,
) -> Result<AssignmentDump> {
    cfg.validate()?;
    let seed = crate::seed::derive_seed(cfg.seed, STREAM_SAMPLING, image_id);
    let anchor_labels = assign_anchors(&anchors, instances, cfg);
    let roi_targets = assign_rois(&rois, instances, categories, cfg)?;
    let rpn_sample = sample_rpn(&anchor_labels, cfg, seed).ok();
    let roi_sample = sample_rois(&roi_targets, cfg, seed).ok();
    Ok(AssignmentDump { image_id, anchors, anchor_labels, rpn_sample, rois, roi_targets, roi_sample })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::Provenance;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    fn inst(id: u64, category_id: u64, bbox: BBox, provenance: Provenance) -> Instance {
        Instance { id, image_id: 1, category_id, bbox, provenance }
    }

    // IoU of [0,100]x[0,100] with [s,100+s]x[0,100] is (100-s)/(100+s).
    fn shifted_for(target: f64) -> f64 {
        100.0 * (1.0 - target) / (1.0 + target)
    }

    #[test]
    fn anchor_labels() {
        let cfg = AssignConfig::default();
        let base = bx(0.0, 0.0, 100.0, 100.0);
        let gt = vec![inst(1, 1, base, Provenance::GROUND_TRUTH)];
        let unsafe_only = vec![inst(1, 1, base, Provenance::unsafe_prediction(0.5))];

        let a08 = bx(shifted_for(0.8), 0.0, 100.0, 100.0);
        let a075 = bx(shifted_for(0.75), 0.0, 100.0, 100.0);
        let far = bx(300.0, 300.0, 10.0, 10.0);
        let middle = bx(shifted_for(0.5), 0.0, 100.0, 100.0);

        assert_eq!(assign_anchors(&[a08], &gt, &cfg), vec![AnchorLabel::Positive]);
        assert_eq!(assign_anchors(&[a075], &unsafe_only, &cfg), vec![AnchorLabel::Undefined]);
        assert_eq!(assign_anchors(&[far], &gt, &cfg), vec![AnchorLabel::Negative]);
        // ignore band between the negative and positive thresholds
        assert_eq!(assign_anchors(&[middle], &gt, &cfg), vec![AnchorLabel::Undefined]);
        // safe predictions supervise like ground truth
        let safe = vec![inst(1, 1, base, Provenance::safe(0.95))];
        assert_eq!(assign_anchors(&[a08], &safe, &cfg), vec![AnchorLabel::Positive]);
    }

    #[test]
    fn roi_targets_supervised_and_unsafe() {
        let cfg = AssignConfig::default();
        let cats = vec![Category::new(1, "car"), Category::new(2, "truck")];
        let base = bx(0.0, 0.0, 100.0, 100.0);

        let gt = vec![inst(1, 2, base, Provenance::GROUND_TRUTH)];
        let t = assign_rois(&[bx(shifted_for(0.9), 0.0, 100.0, 100.0)], &gt, &cats, &cfg).unwrap();
        let r = &t.rois[0];
        assert_eq!((r.class_index, r.mask, r.regression_valid), (1, 1, true));
        assert_eq!(r.weights, vec![1, 1, 1]);

        let unsafe_car = vec![inst(1, 1, base, Provenance::unsafe_prediction(0.6))];
        let t = assign_rois(&[bx(shifted_for(0.6), 0.0, 100.0, 100.0)], &unsafe_car, &cats, &cfg).unwrap();
        let r = &t.rois[0];
        assert_eq!(r.mask, 0);
        assert_eq!(r.weights, vec![0, 1, 0]);
        assert_eq!(r.class_index, t.background_index());
        assert!(!r.regression_valid);
    }

    /// Exhaustive matcher over every instance for the two-instance case.
    fn brute_force_match(roi: &BBox, instances: &[Instance], thresh: f64) -> Option<u64> {
        let mut candidates: Vec<(f64, u64)> =
            instances.iter().map(|i| (iou(roi, &i.bbox), i.id)).filter(|(v, _)| *v >= thresh).collect();
        candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        candidates.first().map(|c| c.1)
    }

    #[test]
    fn roi_prefers_highest_iou_instance() {
        let cfg = AssignConfig::default();
        let cats = vec![Category::new(1, "car"), Category::new(2, "truck")];
        let roi = bx(0.0, 0.0, 100.0, 100.0);
        // GT shifted right (IoU 0.7), unsafe shifted down (IoU 0.6)
        let instances = vec![
            inst(1, 1, bx(0.0, shifted_for(0.6), 100.0, 100.0), Provenance::unsafe_prediction(0.5)),
            inst(2, 2, bx(shifted_for(0.7), 0.0, 100.0, 100.0), Provenance::GROUND_TRUTH),
        ];
        let t = assign_rois(&[roi], &instances, &cats, &cfg).unwrap();
        assert_eq!(t.rois[0].matched_instance, brute_force_match(&roi, &instances, 0.5));
        assert_eq!(t.rois[0].matched_instance, Some(2));
        assert_eq!(t.rois[0].mask, 1);
    }

    #[test]
    fn roi_ties_go_to_lowest_id() {
        let cfg = AssignConfig::default();
        let cats = vec![Category::new(1, "car"), Category::new(2, "truck")];
        let b = bx(0.0, 0.0, 10.0, 10.0);
        let instances = vec![inst(7, 2, b, Provenance::GROUND_TRUTH), inst(3, 1, b, Provenance::GROUND_TRUTH)];
        let t = assign_rois(&[b], &instances, &cats, &cfg).unwrap();
        assert_eq!(t.rois[0].matched_instance, Some(3));
    }

    fn labels(pos: usize, neg: usize, undef: usize) -> Vec<AnchorLabel> {
        let mut v = vec![AnchorLabel::Positive; pos];
        v.extend(vec![AnchorLabel::Undefined; undef]);
        v.extend(vec![AnchorLabel::Negative; neg]);
        v
    }

    #[test]
    fn rpn_sample_counts() {
        let cfg = AssignConfig::default();
        let s = sample_rpn(&labels(200, 2000, 50), &cfg, 1).unwrap();
        assert_eq!((s.positives.len(), s.negatives.len()), (128, 128));
        // negatives fill the positive deficit
        let s = sample_rpn(&labels(10, 2000, 0), &cfg, 1).unwrap();
        assert_eq!((s.positives.len(), s.negatives.len()), (10, 246));
        // and positives fill the negative deficit
        let s = sample_rpn(&labels(300, 20, 0), &cfg, 1).unwrap();
        assert_eq!((s.positives.len(), s.negatives.len()), (236, 20));
        assert!(sample_rpn(&labels(0, 0, 9), &cfg, 1).is_err());
    }

    fn roi_targets(pos: usize, bg: usize, unsafe_: usize) -> RoiTargets {
        let mk = |kind: Option<ProvenanceKind>| RoiTarget {
            class_index: 0,
            mask: if kind == Some(ProvenanceKind::UnsafePrediction) { 0 } else { 1 },
            weights: vec![1, 1],
            regression_valid: kind.is_some_and(ProvenanceKind::is_trusted),
            matched_instance: kind.map(|_| 1),
            matched_kind: kind,
            matched_iou: 0.0,
        };
        let mut rois = vec![mk(Some(ProvenanceKind::GroundTruth)); pos];
        rois.extend(vec![mk(None); bg]);
        rois.extend(vec![mk(Some(ProvenanceKind::UnsafePrediction)); unsafe_]);
        RoiTargets { num_categories: 1, columns: vec![1], rois }
    }

    #[test]
    fn roi_sample_counts() {
        let cfg = AssignConfig::default();
        let s = sample_rois(&roi_targets(100, 500, 20), &cfg, 9).unwrap();
        assert_eq!((s.positives.len(), s.negatives.len()), (31, 93));

        let s = sample_rois(&roi_targets(10, 500, 0), &cfg, 9).unwrap();
        assert_eq!((s.positives.len(), s.negatives.len()), (10, 114));

        // excluded unsafe ROIs never enter the pool
        let t = roi_targets(5, 10, 50);
        let ex = AssignConfig { unsafe_sampling: UnsafeSampling::Excluded, ..cfg.clone() };
        let s = sample_rois(&t, &ex, 9).unwrap();
        assert_eq!(s.len(), 15);
        assert!(s.indices().iter().all(|&i| !t.rois[i].is_unsafe()));
        let s = sample_rois(&t, &cfg, 9).unwrap();
        assert_eq!(s.len(), 65);

        assert!(matches!(sample_rois(&roi_targets(0, 0, 0), &cfg, 1), Err(Error::NoEligible(_))));
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = AssignConfig::default();
        let l = labels(300, 3000, 100);
        assert_eq!(sample_rpn(&l, &cfg, 77).unwrap(), sample_rpn(&l, &cfg, 77).unwrap());
        assert_ne!(sample_rpn(&l, &cfg, 77).unwrap(), sample_rpn(&l, &cfg, 78).unwrap());
    }

    #[test]
    fn quota_rounding() {
        assert_eq!(positive_quota(124, 0.25), 31);
        assert_eq!(positive_quota(256, 0.5), 128);
        assert_eq!(positive_quota(10, 0.3), 3);
        assert_eq!(positive_quota(10, 0.25), 3);
    }

    #[test]
    fn config_validation() {
        assert!(AssignConfig::default().validate().is_ok());
        let bad = AssignConfig { rpn_neg_iou: 0.8, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = AssignConfig { roi_batch: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn grid_covers_image() {
        let g = anchor_grid(64.0, 32.0, 16.0, &[16.0], &[1.0]);
        assert_eq!(g.len(), 8);
        assert_eq!(g[0], bx(0.0, 0.0, 16.0, 16.0));
        let g = anchor_grid(64.0, 64.0, 16.0, &[32.0, 64.0], &[0.5, 1.0, 2.0]);
        assert_eq!(g.len(), 16 * 6);
        assert!(g.iter().all(|b| b.is_within(64.0, 64.0)));
    }
}
