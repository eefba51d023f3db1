//! Detection metrics: AP at a fixed IoU threshold (all-point interpolation),
//! mAP, optimal LRP and MoLRP.
//!
//! Detections are matched greedily in descending score order (ties keep
//! input order) to the best still-unmatched ground truth of the same image and
//! category. Only `GroundTruth` instances count as evaluation ground truth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::annotations::{iou, Dataset, Detection, DetectionSet, Instance};
use crate::error::{Error, Result};

/// Outcome of one detection after matching, in ranking order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ranked {
    pub score: f64,
    /// IoU with the matched ground truth, `None` for a false positive.
    pub matched_iou: Option<f64>,
}

/// Greedy matcher shared by AP and oLRP. Returns the ranked outcomes and the
/// number of ground-truth boxes.
pub fn match_category(dets: &[&Detection], gts: &[&Instance], iou_thresh: f64) -> (Vec<Ranked>, usize) {
    let mut order: Vec<&Detection> = dets.to_vec();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));

    let mut by_image: BTreeMap<u64, Vec<(&Instance, bool)>> = BTreeMap::new();
    for g in gts {
        by_image.entry(g.image_id).or_default().push((g, false));
    }

    let ranked = order
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            if let Some(candidates) = by_image.get(&d.image_id) {
                for (k, (g, used)) in candidates.iter().enumerate() {
                    if *used {
                        continue;
                    }
                    let v = iou(&d.bbox, &g.bbox);
                    if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                        best = Some((k, v));
                    }
                }
            }
            if let Some((k, _)) = best {
                by_image.get_mut(&d.image_id).expect("image present")[k].1 = true;
            }
            Ranked { score: d.score, matched_iou: best.map(|(_, v)| v) }
        })
        .collect();
    (ranked, gts.len())
}

/// Area under the precision envelope, as a percentage. `None` without ground truth.
pub fn ap_from_ranked(ranked: &[Ranked], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let precision: Vec<f64> = ranked
        .iter()
        .enumerate()
        .map(|(k, r)| {
            tp += r.matched_iou.is_some() as usize;
            tp as f64 / (k + 1) as f64
        })
        .collect();
    let mut envelope = precision;
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let sum: f64 = ranked.iter().zip(&envelope).filter(|(r, _)| r.matched_iou.is_some()).map(|(_, p)| *p).sum();
    Some(100.0 * sum / n_gt as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrpPoint {
    /// Score threshold; `None` means no detection is kept.
    pub threshold: Option<f64>,
    pub lrp: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Minimum LRP over every distinct score threshold (fraction, not percentage).
pub fn olrp_from_ranked(ranked: &[Ranked], n_gt: usize, tau: f64) -> Option<LrpPoint> {
    if n_gt == 0 {
        return None;
    }
    let mut best = LrpPoint { threshold: None, lrp: 1.0, tp: 0, fp: 0, fn_: n_gt };
    let (mut tp, mut loc) = (0usize, 0.0f64);
    for (k, r) in ranked.iter().enumerate() {
        if let Some(v) = r.matched_iou {
            tp += 1;
            loc += (1.0 - v) / (1.0 - tau);
        }
        let last_at_score = ranked.get(k + 1).is_none_or(|next| next.score != r.score);
        if !last_at_score {
            continue;
        }
        let fp = k + 1 - tp;
        let fn_ = n_gt - tp;
        let lrp = (loc + fp as f64 + fn_ as f64) / (tp + fp + fn_) as f64;
        if lrp < best.lrp {
            best = LrpPoint { threshold: Some(r.score), lrp, tp, fp, fn_ };
        }
    }
    Some(best)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("LRP tau must be in (0, 1), got {tau}")))
    }
}

fn category_inputs<'a>(
    dets: &'a DetectionSet,
    gt: &'a Dataset,
    category_id: u64,
) -> Result<(Vec<&'a Detection>, Vec<&'a Instance>)> {
    if gt.category(category_id).is_none() {
        return Err(Error::UnknownCategory(format!("category id {category_id}")));
    }
    let d = dets.detections.iter().filter(|d| d.category_id == category_id).collect();
    let g = gt.ground_truth().filter(|i| i.category_id == category_id).collect();
    Ok((d, g))
}

/// AP (percentage) of one category; `None` when it has no ground truth.
pub fn average_precision(dets: &DetectionSet, gt: &Dataset, category_id: u64, iou_thresh: f64) -> Result<Option<f64>> {
    let (d, g) = category_inputs(dets, gt, category_id)?;
    let (ranked, n) = match_category(&d, &g, iou_thresh);
    Ok(ap_from_ranked(&ranked, n))
}

/// Optimal LRP (percentage) of one category; `None` when it has no ground truth.
pub fn olrp(dets: &DetectionSet, gt: &Dataset, category_id: u64, tau: f64) -> Result<Option<f64>> {
    check_tau(tau)?;
    let (d, g) = category_inputs(dets, gt, category_id)?;
    let (ranked, n) = match_category(&d, &g, tau);
    Ok(olrp_from_ranked(&ranked, n, tau).map(|p| 100.0 * p.lrp))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEval {
    pub category_id: u64,
    pub name: String,
    pub gt: usize,
    pub detections: usize,
    #[serde(rename = "AP")]
    pub ap: Option<f64>,
    #[serde(rename = "oLRP")]
    pub olrp: Option<f64>,
    /// Counts at the oLRP-optimal score threshold.
    pub optimal: Option<LrpPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub tau: f64,
    pub per_category: Vec<CategoryEval>,
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
    #[serde(rename = "MoLRP")]
    pub molrp: Option<f64>,
    /// Categories without ground truth, left out of both means.
    pub skipped: Vec<String>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-category AP and oLRP for every category of `gt`, plus mAP and MoLRP.
pub fn evaluate(dets: &DetectionSet, gt: &Dataset, iou_thresh: f64, tau: f64) -> Result<EvalReport> {
    check_tau(tau)?;
    if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(Error::Config(format!("IoU threshold must be in (0, 1], got {iou_thresh}")));
    }
    let mut categories = gt.categories.clone();
    categories.sort_by_key(|c| c.id);

    let mut per_category = Vec::with_capacity(categories.len());
    let mut skipped = Vec::new();
    for cat in &categories {
        let (d, g) = category_inputs(dets, gt, cat.id)?;
        let (ranked, n) = match_category(&d, &g, iou_thresh);
        let ap = ap_from_ranked(&ranked, n);
        let optimal = if tau == iou_thresh {
            olrp_from_ranked(&ranked, n, tau)
        } else {
            let (ranked, n) = match_category(&d, &g, tau);
            olrp_from_ranked(&ranked, n, tau)
        };
        if n == 0 {
            skipped.push(cat.name.clone());
        }
        per_category.push(CategoryEval {
            category_id: cat.id,
            name: cat.name.clone(),
            gt: n,
            detections: d.len(),
            ap,
            olrp: optimal.map(|p| 100.0 * p.lrp),
            optimal,
        });
    }
    Ok(EvalReport {
        iou_threshold: iou_thresh,
        tau,
        map: mean(per_category.iter().filter_map(|c| c.ap)),
        molrp: mean(per_category.iter().filter_map(|c| c.olrp)),
        per_category,
        skipped,
    })
}

pub fn mean_ap(dets: &DetectionSet, gt: &Dataset, iou_thresh: f64) -> Result<Option<f64>> {
    Ok(evaluate(dets, gt, iou_thresh, 0.5)?.map)
}

pub fn molrp(dets: &DetectionSet, gt: &Dataset, tau: f64) -> Result<Option<f64>> {
    Ok(evaluate(dets, gt, tau, tau)?.molrp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::{BBox, Category, Image, Provenance};

    fn bx(x: f64, w: f64) -> BBox {
        BBox::new(x, 0.0, w, 10.0).unwrap()
    }

    fn gt(boxes: &[(u64, BBox)]) -> Dataset {
        Dataset {
            images: vec![Image::new(1, 1000, 100, "")],
            categories: vec![Category::new(1, "car"), Category::new(2, "bus")],
            instances: boxes
                .iter()
                .enumerate()
                .map(|(i, &(category_id, bbox))| Instance {
                    id: i as u64 + 1,
                    image_id: 1,
                    category_id,
                    bbox,
                    provenance: Provenance::GROUND_TRUTH,
                })
                .collect(),
        }
    }

    fn det(category_id: u64, bbox: BBox, score: f64) -> Detection {
        Detection { image_id: 1, category_id, bbox, score }
    }

    #[test]
    fn perfect_detector() {
        let g = gt(&[(1, bx(0.0, 10.0)), (1, bx(100.0, 10.0)), (2, bx(200.0, 10.0))]);
        let d = DetectionSet::new(g.instances.iter().map(|i| det(i.category_id, i.bbox, 1.0)).collect());
        let r = evaluate(&d, &g, 0.5, 0.5).unwrap();
        assert_eq!(r.map, Some(100.0));
        assert_eq!(r.molrp, Some(0.0));
    }

    #[test]
    fn no_detections() {
        let g = gt(&[(1, bx(0.0, 10.0))]);
        let d = DetectionSet::default();
        assert_eq!(average_precision(&d, &g, 1, 0.5).unwrap(), Some(0.0));
        assert_eq!(olrp(&d, &g, 1, 0.5).unwrap(), Some(100.0));
        assert_eq!(average_precision(&d, &g, 2, 0.5).unwrap(), None);
    }

    #[test]
    fn hand_enumerated_pr_curve() {
        // ranks: TP (P=1, R=.5), FP (P=.5), TP (P=2/3, R=1)
        // envelope: 1 at R=.5, 2/3 at R=1 -> AP = .5 + (2/3)(.5) = 5/6
        let g = gt(&[(1, bx(0.0, 10.0)), (1, bx(100.0, 10.0))]);
        let d = DetectionSet::new(vec![
            det(1, bx(0.0, 10.0), 0.9),
            det(1, bx(500.0, 10.0), 0.8),
            det(1, bx(100.0, 10.0), 0.7),
        ]);
        let ap = average_precision(&d, &g, 1, 0.5).unwrap().unwrap();
        assert!((ap - 250.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn lrp_single_match() {
        // IoU 0.75: [0,10] vs [0,7.5]
        let g = gt(&[(1, bx(0.0, 10.0))]);
        let d = DetectionSet::new(vec![det(1, bx(0.0, 7.5), 0.8)]);
        let v = olrp(&d, &g, 1, 0.5).unwrap().unwrap();
        assert!((v - 50.0).abs() < 1e-9);
    }

    #[test]
    fn duplicates_count_once() {
        let g = gt(&[(1, bx(0.0, 10.0))]);
        let d = DetectionSet::new(vec![det(1, bx(0.0, 10.0), 0.9), det(1, bx(0.0, 10.0), 0.8)]);
        let dd: Vec<&Detection> = d.detections.iter().collect();
        let gg: Vec<&Instance> = g.instances.iter().collect();
        let (ranked, _) = match_category(&dd, &gg, 0.5);
        assert_eq!(ranked.iter().filter(|r| r.matched_iou.is_some()).count(), 1);
    }

    #[test]
    fn mean_over_categories() {
        let g = gt(&[(1, bx(0.0, 10.0)), (2, bx(100.0, 10.0))]);
        let d = DetectionSet::new(vec![det(1, bx(0.0, 10.0), 0.9)]);
        assert_eq!(mean_ap(&d, &g, 0.5).unwrap(), Some(50.0));
        let g1 = gt(&[(1, bx(0.0, 10.0))]);
        let r = evaluate(&d, &g1, 0.5, 0.5).unwrap();
        assert_eq!(r.map, Some(100.0));
        assert_eq!(r.skipped, vec!["bus".to_string()]);
    }

    #[test]
    fn predictions_are_not_ground_truth() {
        let mut g = gt(&[(1, bx(0.0, 10.0))]);
        g.instances[0].provenance = Provenance::safe(0.95);
        assert_eq!(average_precision(&DetectionSet::default(), &g, 1, 0.5).unwrap(), None);
    }

    #[test]
    fn errors() {
        let g = gt(&[(1, bx(0.0, 10.0))]);
        let d = DetectionSet::default();
        assert!(matches!(average_precision(&d, &g, 9, 0.5), Err(Error::UnknownCategory(_))));
        assert!(olrp(&d, &g, 1, 1.0).is_err());
        assert!(olrp(&d, &g, 1, 0.0).is_err());
    }
}
