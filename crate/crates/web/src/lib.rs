//! Browser demo bindings. Each export takes plain numbers or JSON strings and
//! returns a JSON string; failures come back as `{"error": ..., "message": ...}`.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::json;
use wasm_bindgen::prelude::*;

use omnia::annotations::{Dataset, ProvenanceKind};
use omnia::assignment::{assign_rois, AssignConfig};
use omnia::merging::{merge_pair, DetectionSource, MergeConfig};
use omnia::simulator::{proposals, run_experiment, DetectorModel, Environment, ExperimentConfig, SimulatedSource};
use omnia::softsig::{binary_loss, categorical_loss, softsig_gradient, softsig_loss, LossBatch};

fn respond(r: Result<serde_json::Value, omnia::Error>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e.kind(), "message": e.to_string() }).to_string(),
    }
}

/// Loss and gradient of one ROI row. `class_index` is the target column
/// (the last column is background); an unsafe row is matched to
/// `class_index` and trained only through the binary term elsewhere.
pub fn softsig_row_json(
    logits: &[f64],
    class_index: usize,
    is_unsafe: bool,
    lambda: f64,
) -> Result<serde_json::Value, omnia::Error> {
    let cols = logits.len();
    if cols < 2 || class_index >= cols {
        return Err(omnia::Error::Batch(format!("need at least 2 logits and class_index < {cols}")));
    }
    let bg = cols - 1;
    let mut targets = Array2::zeros((1, cols));
    let mut weights = Array2::ones((1, cols));
    let mut mask = Array1::ones(1);
    if is_unsafe {
        targets[[0, bg]] = 1.0;
        mask[0] = 0.0;
        weights[[0, class_index]] = 0.0;
        weights[[0, bg]] = 0.0;
    } else {
        targets[[0, class_index]] = 1.0;
    }
    let logits = Array2::from_shape_vec((1, cols), logits.to_vec()).expect("shape matches length");
    let b = LossBatch::new(logits, targets, mask, weights, lambda)?;
    Ok(json!({
        "categorical": categorical_loss(&b)?,
        "binary": binary_loss(&b)?,
        "total": softsig_loss(&b)?,
        "gradient": softsig_gradient(&b)?.row(0).to_vec(),
    }))
}

#[wasm_bindgen]
pub fn softsig_row(logits: Vec<f64>, class_index: usize, is_unsafe: bool, lambda: f64) -> String {
    respond(softsig_row_json(&logits, class_index, is_unsafe, lambda))
}

/// Knobs exposed by the sweep page.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default)]
pub struct SweepParams {
    pub seed: u64,
    pub images_per_domain: usize,
    pub recall: f64,
    pub cross_domain: f64,
    pub jitter: f64,
    pub score_iou_weight: f64,
    pub thresholds: Vec<f64>,
}

impl Default for SweepParams {
    fn default() -> Self {
        let d = DetectorModel::default();
        SweepParams {
            seed: 3,
            images_per_domain: 100,
            recall: d.recall,
            cross_domain: d.cross_domain,
            jitter: d.jitter,
            score_iou_weight: d.score_iou_weight,
            thresholds: vec![0.5, 0.6, 0.7, 0.8, 0.9, 0.95],
        }
    }
}

impl SweepParams {
    fn experiment(&self) -> ExperimentConfig {
        let det = DetectorModel {
            recall: self.recall,
            cross_domain: self.cross_domain,
            jitter: self.jitter,
            score_iou_weight: self.score_iou_weight,
            ..Default::default()
        };
        ExperimentConfig {
            seed: self.seed,
            images_per_domain: self.images_per_domain,
            sweep: self.thresholds.clone(),
            detector_a: det.clone(),
            detector_b: det,
            ..Default::default()
        }
    }
}

/// Enriched-target mAP of every variant, per threshold_high.
pub fn threshold_sweep_json(params: &SweepParams) -> Result<serde_json::Value, omnia::Error> {
    let report = run_experiment(&params.experiment())?;
    let rows: Vec<_> =
        report.sweep.iter().map(|p| json!({ "threshold_high": p.threshold_high, "arms": p.arms })).collect();
    let arms: Vec<_> = report.arms.iter().map(|a| &a.summary).collect();
    Ok(json!({ "seed": report.seed, "arms": arms, "sweep": rows }))
}

#[wasm_bindgen]
pub fn threshold_sweep(params_json: &str) -> String {
    match serde_json::from_str::<SweepParams>(params_json) {
        Ok(p) => respond(threshold_sweep_json(&p)),
        Err(e) => respond(Err(e.into())),
    }
}

fn boxes_of(d: &Dataset, image_id: u64, kind: ProvenanceKind) -> Vec<serde_json::Value> {
    d.instances
        .iter()
        .filter(|i| i.image_id == image_id && i.provenance.kind == kind)
        .map(|i| {
            let name = d.category(i.category_id).map(|c| c.name.as_str()).unwrap_or("");
            json!({ "bbox": i.bbox, "category": name, "score": i.provenance.score })
        })
        .collect()
}

/// One merged image: hidden objects, human labels, safe and unsafe
/// pseudo-labels, and the ROI targets built from them.
pub fn scene_json(seed: u64, image_index: usize, threshold_high: f64) -> Result<serde_json::Value, omnia::Error> {
    let mut cfg = ExperimentConfig { seed, images_per_domain: 20, ..Default::default() };
    cfg.selection.threshold_high = threshold_high;
    cfg.validate()?;
    let env = Environment::build(&cfg)?;
    let pair = SimulatedSource::new(&env, &cfg).detections(1, None)?;
    let out = merge_pair(
        &env.dataset_a,
        &env.dataset_b,
        &pair,
        &MergeConfig { selection: cfg.selection.clone(), ..Default::default() },
    )?;
    let merged = &out.merged.dataset;
    let img = merged
        .images
        .get(image_index % merged.images.len().max(1))
        .ok_or_else(|| omnia::Error::Config("no images".into()))?;
    let origin = out.merged.origins[(img.id - 1) as usize];

    let hidden: Vec<_> = env.hidden.instances.iter().filter(|i| i.image_id == origin.original_id).collect();
    let own: Vec<_> = merged.instances.iter().filter(|i| i.image_id == img.id).cloned().collect();
    let rois = proposals(img, &hidden, seed);
    let targets = assign_rois(&rois, &own, &merged.categories, &AssignConfig::default())?;
    let roi_view: Vec<_> = rois
        .iter()
        .zip(&targets.rois)
        .map(|(b, t)| json!({ "bbox": b, "class_index": t.class_index, "unsafe": t.is_unsafe(), "positive": t.is_positive() }))
        .collect();
    let hidden_view: Vec<_> = hidden
        .iter()
        .map(|i| json!({ "bbox": i.bbox, "category": env.hidden.category(i.category_id).map(|c| c.name.clone()) }))
        .collect();

    Ok(json!({
        "image": img,
        "side": origin.side,
        "categories": merged.categories,
        "hidden": hidden_view,
        "labels": boxes_of(merged, img.id, ProvenanceKind::GroundTruth),
        "safe": boxes_of(merged, img.id, ProvenanceKind::SafePrediction),
        "unsafe": boxes_of(merged, img.id, ProvenanceKind::UnsafePrediction),
        "rois": roi_view,
    }))
}

#[wasm_bindgen]
pub fn scene(seed: u64, image_index: usize, threshold_high: f64) -> String {
    respond(scene_json(seed, image_index, threshold_high))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_explorer_zeroes_unsafe_entries() {
        let v = softsig_row_json(&[0.3, -1.0, 2.0, 0.5], 1, true, 1.0).unwrap();
        let g: Vec<f64> = serde_json::from_value(v["gradient"].clone()).unwrap();
        assert_eq!(g[1].to_bits(), 0);
        assert_eq!(g[3].to_bits(), 0);
        assert!(g[0] > 0.0 && g[2] > 0.0);
        assert_eq!(v["categorical"], 0.0);
    }

    #[test]
    fn row_explorer_rejects_bad_input() {
        let text = softsig_row(vec![0.0], 0, false, 1.0);
        assert!(text.contains("\"error\":\"loss_batch\""));
    }

    #[test]
    fn sweep_returns_one_row_per_threshold() {
        let p = SweepParams { images_per_domain: 10, thresholds: vec![0.6, 0.9], ..Default::default() };
        let v = threshold_sweep_json(&p).unwrap();
        assert_eq!(v["sweep"].as_array().unwrap().len(), 2);
        assert_eq!(v["arms"].as_array().unwrap().len(), 4);
        assert!(threshold_sweep("{not json").contains("\"error\":\"parse\""));
    }

    #[test]
    fn scene_lists_boxes_and_targets() {
        // 20 images per domain: index 25 is B's sixth image
        let v = scene_json(3, 25, 0.9).unwrap();
        assert_eq!(v["image"]["id"], 26);
        assert_eq!(v["side"], "b");
        assert!(!v["rois"].as_array().unwrap().is_empty());
        assert!(v["hidden"].as_array().unwrap().len() >= v["labels"].as_array().unwrap().len());
    }
}
