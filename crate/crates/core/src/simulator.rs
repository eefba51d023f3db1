//! Synthetic detection environment: seeded ground-truth scenes, a noisy
//! detector model, and the experiment harness that runs the merging
//! procedure and its ablation variants against the hidden full annotation.
//!
//! Every random draw comes from a stream split per image id (see
//! [`crate::seed`]), so results do not depend on evaluation order.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::annotations::{
    iou, validate, BBox, Category, Dataset, Detection, DetectionSet, Image, Instance, Provenance, ProvenanceKind,
};
use crate::assignment::{
    anchor_grid, assign_anchors, assign_rois, sample_rois, sample_rpn, AnchorLabel, AssignConfig, UnsafeSampling,
};
use crate::error::{Error, Result};
use crate::merging::{
    iterate, merge_pair, DetectionPair, DetectionSource, MergeConfig, MergeOutput, MergeStats, SharedPolicy, Side,
};
use crate::metrics::{evaluate, match_category, EvalReport};
use crate::seed::{derive_seed, rng_for, STREAM_DETECTOR, STREAM_PROBE, STREAM_ROIS, STREAM_SCENES};
use crate::selection::SelectionConfig;
use crate::softsig::{binary_loss, categorical_loss, softsig_loss, LossBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub n_images: usize,
    pub width: u32,
    pub height: u32,
    pub taxonomy: Vec<String>,
    /// Inclusive range of objects per image.
    pub objects_per_image: (usize, usize),
    /// Inclusive range of box side lengths in pixels.
    pub box_size: (f64, f64),
    /// Maximum IoU between two ground-truth boxes of one image.
    pub overlap_cap: f64,
    pub seed: u64,
    pub domain_tag: String,
    pub first_image_id: u64,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_images: 100,
            width: 256,
            height: 256,
            taxonomy: vec!["car".into(), "person".into(), "truck".into()],
            objects_per_image: (2, 6),
            box_size: (24.0, 96.0),
            overlap_cap: 0.3,
            seed: 3,
            domain_tag: "a".into(),
            first_image_id: 1,
            max_attempts: 200,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.objects_per_image;
        let (smin, smax) = self.box_size;
        if lo > hi {
            return Err(Error::Config("objects_per_image range is empty".into()));
        }
        if !(smin > 0.0 && smin <= smax && smax <= self.width.min(self.height) as f64) {
            return Err(Error::Config(format!("box_size range ({smin}, {smax}) does not fit the image")));
        }
        if !(0.0..1.0).contains(&self.overlap_cap) {
            return Err(Error::Config("overlap_cap must be in [0, 1)".into()));
        }
        if hi > 0 && self.taxonomy.is_empty() {
            return Err(Error::Config("taxonomy is empty".into()));
        }
        Ok(())
    }
}

/// Taxonomy with ids assigned densely in sorted canonical-name order.
pub fn sorted_taxonomy<S: AsRef<str>>(names: &[S]) -> Vec<Category> {
    let set: BTreeSet<String> = names.iter().map(|n| crate::annotations::canonical_name(n.as_ref())).collect();
    set.into_iter().enumerate().map(|(i, name)| Category { id: i as u64 + 1, name }).collect()
}

/// Generates fully annotated scenes. Pairwise IoU of boxes within an image
/// never exceeds `overlap_cap`.
pub fn generate_scenes(cfg: &SceneConfig) -> Result<Dataset> {
    cfg.validate()?;
    let categories = sorted_taxonomy(&cfg.taxonomy);
    let mut images = Vec::with_capacity(cfg.n_images);
    let mut instances = Vec::new();
    let (w_img, h_img) = (cfg.width as f64, cfg.height as f64);

    for k in 0..cfg.n_images {
        let image_id = cfg.first_image_id + k as u64;
        let mut rng = rng_for(cfg.seed, STREAM_SCENES, image_id);
        images.push(Image::new(image_id, cfg.width, cfg.height, &cfg.domain_tag));

        let n = rng.random_range(cfg.objects_per_image.0..=cfg.objects_per_image.1);
        let mut placed: Vec<BBox> = Vec::with_capacity(n);
        for _ in 0..n {
            let category = &categories[rng.random_range(0..categories.len())];
            let mut attempts = 0;
            let bbox = loop {
                if attempts == cfg.max_attempts {
                    return Err(Error::Infeasible { image_id, attempts });
                }
                attempts += 1;
                let w = rng.random_range(cfg.box_size.0..=cfg.box_size.1);
                let h = rng.random_range(cfg.box_size.0..=cfg.box_size.1);
                let x = rng.random_range(0.0..=w_img - w);
                let y = rng.random_range(0.0..=h_img - h);
                let b = BBox { x, y, w, h };
                if placed.iter().all(|p| iou(p, &b) <= cfg.overlap_cap) {
                    break b;
                }
            };
            placed.push(bbox);
            instances.push(Instance {
                id: instances.len() as u64 + 1,
                image_id,
                category_id: category.id,
                bbox,
                provenance: Provenance::GROUND_TRUTH,
            });
        }
    }
    Ok(Dataset { images, categories, instances })
}

/// Removes the named categories and all their instances.
pub fn strip_categories<S: AsRef<str>>(d: &Dataset, names: &[S]) -> Dataset {
    let drop: BTreeSet<String> = names.iter().map(|n| crate::annotations::canonical_name(n.as_ref())).collect();
    let dropped_ids: BTreeSet<u64> = d.categories.iter().filter(|c| drop.contains(&c.name)).map(|c| c.id).collect();
    Dataset {
        images: d.images.clone(),
        categories: d.categories.iter().filter(|c| !dropped_ids.contains(&c.id)).cloned().collect(),
        instances: d.instances.iter().filter(|i| !dropped_ids.contains(&i.category_id)).cloned().collect(),
    }
}

/// Concatenates two datasets that share a taxonomy and have disjoint image
/// ids. Instances of `b` are renumbered after those of `a`.
pub fn concat(a: &Dataset, b: &Dataset) -> Dataset {
    let offset = a.next_instance_id() - 1;
    Dataset {
        images: a.images.iter().chain(&b.images).cloned().collect(),
        categories: a.categories.clone(),
        instances: a
            .instances
            .iter()
            .cloned()
            .chain(b.instances.iter().map(|i| Instance { id: i.id + offset, ..i.clone() }))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorModel {
    /// Domain the detector was trained on.
    pub domain_tag: String,
    pub recall: f64,
    pub per_category_recall: BTreeMap<String, f64>,
    /// Localization noise as a fraction of the box size.
    pub jitter: f64,
    /// `score = clip(score_base + score_iou_weight * IoU + noise)`.
    pub score_base: f64,
    pub score_iou_weight: f64,
    pub score_noise: f64,
    /// Poisson mean of false positives per image.
    pub fp_per_image: f64,
    pub fp_score_mean: f64,
    pub fp_score_sd: f64,
    /// Recall multiplier on images from another domain.
    pub cross_domain: f64,
    /// Derived from the experiment seed when absent.
    pub seed: Option<u64>,
}

impl Default for DetectorModel {
    fn default() -> Self {
        DetectorModel {
            domain_tag: String::new(),
            recall: 0.85,
            per_category_recall: BTreeMap::new(),
            jitter: 0.08,
            score_base: 0.3,
            score_iou_weight: 0.65,
            score_noise: 0.1,
            fp_per_image: 1.0,
            fp_score_mean: 0.3,
            fp_score_sd: 0.15,
            cross_domain: 0.8,
            seed: None,
        }
    }
}

impl DetectorModel {
    /// Noise-free detector: finds every object exactly with score 1.
    pub fn oracle() -> Self {
        DetectorModel {
            recall: 1.0,
            jitter: 0.0,
            score_base: 0.5,
            score_iou_weight: 0.5,
            score_noise: 0.0,
            fp_per_image: 0.0,
            cross_domain: 1.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |v: f64| (0.0..=1.0).contains(&v);
        if !prob(self.recall) || !prob(self.cross_domain) || !self.per_category_recall.values().all(|&v| prob(v)) {
            return Err(Error::Config("detector probabilities must be in [0, 1]".into()));
        }
        if self.jitter < 0.0 || self.score_noise < 0.0 || self.fp_score_sd < 0.0 || self.fp_per_image < 0.0 {
            return Err(Error::Config("detector noise parameters must be non-negative".into()));
        }
        Ok(())
    }

    pub fn recall_for(&self, name: &str) -> f64 {
        self.per_category_recall.get(name).copied().unwrap_or(self.recall)
    }

    /// Detector retrained on merged data whose pseudo-labels cover the other
    /// domain to the given extent: the cross-domain gap closes proportionally.
    pub fn adapted(&self, coverage: f64) -> DetectorModel {
        let coverage = coverage.clamp(0.0, 1.0);
        DetectorModel { cross_domain: self.cross_domain + (1.0 - self.cross_domain) * coverage, ..self.clone() }
    }
}

const MIN_SCORE: f64 = 1e-3;

fn clip_score(s: f64) -> f64 {
    s.clamp(MIN_SCORE, 1.0)
}

/// Simulates the detector on every image of `hidden`, for the categories of
/// `taxonomy` (matched by name). Detections use `taxonomy`'s ids.
///
/// All random draws are made for every object regardless of the outcome, so
/// raising recall only ever adds detections.
pub fn simulate_detector(
    hidden: &Dataset,
    model: &DetectorModel,
    taxonomy: &[Category],
    seed: u64,
) -> Result<DetectionSet> {
    model.validate()?;
    let seed = model.seed.unwrap_or(seed);
    let names: BTreeMap<u64, &str> = hidden.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
    let det_ids: BTreeMap<&str, u64> = taxonomy.iter().map(|c| (c.name.as_str(), c.id)).collect();
    let by_image = hidden.instances_by_image();

    let mut out = Vec::new();
    for img in &hidden.images {
        let mut rng = rng_for(seed, STREAM_DETECTOR, img.id);
        let (wi, hi) = (img.width as f64, img.height as f64);
        let degradation = if img.domain_tag == model.domain_tag { 1.0 } else { model.cross_domain };

        for inst in by_image.get(&img.id).map(Vec::as_slice).unwrap_or(&[]) {
            let u: f64 = rng.random();
            let z: [f64; 5] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let name = names.get(&inst.category_id).copied().unwrap_or("");
            let Some(&category_id) = det_ids.get(name) else { continue };
            if u >= model.recall_for(name) * degradation {
                continue;
            }
            let b = inst.bbox;
            let w = b.w * (model.jitter * z[2]).exp();
            let h = b.h * (model.jitter * z[3]).exp();
            let x = b.x + model.jitter * b.w * z[0] + (b.w - w) / 2.0;
            let y = b.y + model.jitter * b.h * z[1] + (b.h - h) / 2.0;
            let Some(pred) = (BBox { x, y, w, h }).clamp_to(wi, hi) else { continue };
            let score =
                clip_score(model.score_base + model.score_iou_weight * iou(&pred, &b) + model.score_noise * z[4]);
            out.push(Detection { image_id: img.id, category_id, bbox: pred, score });
        }

        if model.fp_per_image > 0.0 && !taxonomy.is_empty() {
            let n_fp = Poisson::new(model.fp_per_image).expect("positive mean").sample(&mut rng) as usize;
            let side_max = 0.4 * wi.min(hi);
            for _ in 0..n_fp {
                let category_id = taxonomy[rng.random_range(0..taxonomy.len())].id;
                let w = rng.random_range(0.1 * side_max..=side_max);
                let h = rng.random_range(0.1 * side_max..=side_max);
                let x = rng.random_range(0.0..=wi - w);
                let y = rng.random_range(0.0..=hi - h);
                let z: f64 = rng.sample(StandardNormal);
                let score = clip_score(model.fp_score_mean + model.fp_score_sd * z);
                out.push(Detection { image_id: img.id, category_id, bbox: BBox { x, y, w, h }, score });
            }
        }
    }
    Ok(DetectionSet::new(out))
}

// ---------------------------------------------------------------------------
// Experiment harness

/// How an arm of the experiment treats predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// No predictions at all; missing annotations stay background.
    Naive,
    /// Safe predictions are targets, unsafe ones are treated as background.
    Hard,
    /// Safe predictions are targets, unsafe ROIs are never sampled.
    Discard,
    /// Unsafe ROIs are sampled with SoftSig masks and weights.
    Softsig,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Naive, Variant::Hard, Variant::Discard, Variant::Softsig];

    /// Whether an instance of this provenance is a training target.
    fn keeps(self, kind: ProvenanceKind) -> bool {
        match (self, kind) {
            (_, ProvenanceKind::GroundTruth) => true,
            (Variant::Naive, _) => false,
            (_, ProvenanceKind::SafePrediction) => true,
            (Variant::Softsig, ProvenanceKind::UnsafePrediction) => true,
            // discard keeps unsafe boxes for masking but not as positives
            (Variant::Discard, ProvenanceKind::UnsafePrediction) => false,
            (Variant::Hard, ProvenanceKind::UnsafePrediction) => false,
        }
    }

    /// Instances handed to anchor/ROI assignment.
    fn assignment_instances(self, instances: &[&Instance]) -> Vec<Instance> {
        instances
            .iter()
            .copied()
            .filter(|i| match self {
                Variant::Naive => i.provenance.is_ground_truth(),
                Variant::Hard => i.provenance.kind.is_trusted(),
                Variant::Discard | Variant::Softsig => true,
            })
            .cloned()
            .collect()
    }

    fn unsafe_sampling(self) -> UnsafeSampling {
        match self {
            Variant::Discard => UnsafeSampling::Excluded,
            _ => UnsafeSampling::Pooled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Images per domain; domain `a` holds dataset A, domain `b` dataset B.
    pub images_per_domain: usize,
    pub width: u32,
    pub height: u32,
    pub categories_a: Vec<String>,
    pub categories_b: Vec<String>,
    pub objects_per_image: (usize, usize),
    pub box_size: (f64, f64),
    pub overlap_cap: f64,
    pub shared_policy: Option<SharedPolicy>,
    pub variants: Vec<Variant>,
    /// `threshold_high` values for the threshold sweep; empty disables it.
    pub sweep: Vec<f64>,
    /// Self-training rounds; 2 or more adds the iterative trend rows.
    pub rounds: usize,
    /// Images whose sampled ROIs feed the probe loss.
    pub probe_images: usize,
    pub selection: SelectionConfig,
    pub assign: AssignConfig,
    pub detector_a: DetectorModel,
    pub detector_b: DetectorModel,
    pub anchor_stride: f64,
    pub anchor_sizes: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 3,
            images_per_domain: 100,
            width: 256,
            height: 256,
            categories_a: vec!["bag".into(), "dress".into(), "footwear".into()],
            categories_b: vec!["bus".into(), "car".into(), "truck".into()],
            objects_per_image: (2, 6),
            box_size: (24.0, 96.0),
            overlap_cap: 0.3,
            shared_policy: None,
            variants: Variant::ALL.to_vec(),
            sweep: Vec::new(),
            rounds: 1,
            probe_images: 16,
            selection: SelectionConfig::default(),
            assign: AssignConfig::default(),
            detector_a: DetectorModel::default(),
            detector_b: DetectorModel::default(),
            anchor_stride: 16.0,
            anchor_sizes: vec![32.0, 64.0, 128.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

pub const DOMAIN_A: &str = "a";
pub const DOMAIN_B: &str = "b";

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let a: BTreeSet<&String> = self.categories_a.iter().collect();
        let shared = self.categories_b.iter().filter(|c| a.contains(c)).count();
        if shared > 0 && self.shared_policy.is_none() {
            return Err(Error::Config("categories_a and categories_b overlap but no shared_policy is set".into()));
        }
        if self.categories_a.is_empty() && self.categories_b.is_empty() {
            return Err(Error::Config("no categories configured".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be a positive integer".into()));
        }
        self.selection.validate()?;
        self.assign.validate()?;
        self.detector_a.validate()?;
        self.detector_b.validate()?;
        for &h in &self.sweep {
            SelectionConfig { threshold_high: h, ..self.selection.clone() }.validate()?;
        }
        Ok(())
    }

    fn all_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.categories_a.iter().chain(&self.categories_b).cloned().collect();
        v.sort();
        v.dedup();
        v
    }

    fn scene(&self, domain: &str, first_image_id: u64) -> SceneConfig {
        SceneConfig {
            n_images: self.images_per_domain,
            width: self.width,
            height: self.height,
            taxonomy: self.all_names(),
            objects_per_image: self.objects_per_image,
            box_size: self.box_size,
            overlap_cap: self.overlap_cap,
            seed: self.seed,
            domain_tag: domain.into(),
            first_image_id,
            max_attempts: 200,
        }
    }

    fn merge_config(&self, selection: SelectionConfig) -> MergeConfig {
        MergeConfig { selection, shared_policy: self.shared_policy, rounds: self.rounds }
    }
}

/// Hidden ground truth plus the two partially labeled datasets built from it.
#[derive(Debug, Clone)]
pub struct Environment {
    pub hidden: Dataset,
    pub hidden_a: Dataset,
    pub hidden_b: Dataset,
    pub dataset_a: Dataset,
    pub dataset_b: Dataset,
}

impl Environment {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let hidden_a = generate_scenes(&cfg.scene(DOMAIN_A, 1))?;
        let hidden_b = generate_scenes(&cfg.scene(DOMAIN_B, cfg.images_per_domain as u64 + 1))?;
        let a_names: BTreeSet<&String> = cfg.categories_a.iter().collect();
        let b_names: BTreeSet<&String> = cfg.categories_b.iter().collect();
        let all = cfg.all_names();
        let not_a: Vec<&String> = all.iter().filter(|n| !a_names.contains(n)).collect();
        let not_b: Vec<&String> = all.iter().filter(|n| !b_names.contains(n)).collect();
        Ok(Environment {
            hidden: concat(&hidden_a, &hidden_b),
            dataset_a: strip_categories(&hidden_a, &not_a),
            dataset_b: strip_categories(&hidden_b, &not_b),
            hidden_a,
            hidden_b,
        })
    }

    fn taxonomy(&self, side: Side) -> &[Category] {
        match side {
            Side::A => &self.dataset_a.categories,
            Side::B => &self.dataset_b.categories,
        }
    }
}

/// Simulated detectors as a [`DetectionSource`]. Round 1 uses the initial
/// detector models; later rounds use models adapted by the pseudo-label
/// coverage of the previous round.
#[derive(Debug, Clone)]
pub struct SimulatedSource<'a> {
    pub env: &'a Environment,
    /// Trained on dataset A, runs on B's images.
    pub detector_a: DetectorModel,
    /// Trained on dataset B, runs on A's images.
    pub detector_b: DetectorModel,
    pub seed: u64,
}

impl<'a> SimulatedSource<'a> {
    pub fn new(env: &'a Environment, cfg: &ExperimentConfig) -> Self {
        let prepare = |m: &DetectorModel, domain: &str, idx: u64| DetectorModel {
            domain_tag: if m.domain_tag.is_empty() { domain.to_string() } else { m.domain_tag.clone() },
            seed: Some(m.seed.unwrap_or_else(|| derive_seed(cfg.seed, STREAM_DETECTOR, idx))),
            ..m.clone()
        };
        SimulatedSource {
            env,
            detector_a: prepare(&cfg.detector_a, DOMAIN_A, 1),
            detector_b: prepare(&cfg.detector_b, DOMAIN_B, 2),
            seed: cfg.seed,
        }
    }

    fn run(&self, det_a: &DetectorModel, det_b: &DetectorModel) -> Result<DetectionPair> {
        Ok(DetectionPair {
            on_a: simulate_detector(&self.env.hidden_a, det_b, self.env.taxonomy(Side::B), self.seed)?,
            on_b: simulate_detector(&self.env.hidden_b, det_a, self.env.taxonomy(Side::A), self.seed)?,
        })
    }
}

/// Score mass of pseudo-labels per image of `side`'s images for the other
/// side's categories, relative to the human labels per image of those
/// categories on the other side. Uses only what the merged dataset exposes.
pub fn pseudo_label_coverage(out: &MergeOutput, side: Side) -> f64 {
    let d = &out.merged.dataset;
    let other_names: BTreeSet<&str> = out.taxonomy.source(side.other()).iter().map(|c| c.name.as_str()).collect();
    let other_ids: BTreeSet<u64> =
        d.categories.iter().filter(|c| other_names.contains(c.name.as_str())).map(|c| c.id).collect();
    let side_of: BTreeMap<u64, Side> = d.images.iter().zip(&out.merged.origins).map(|(i, o)| (i.id, o.side)).collect();
    let n_imgs = |s: Side| out.merged.origins.iter().filter(|o| o.side == s).count().max(1) as f64;

    let (mut pseudo, mut human) = (0.0, 0usize);
    for inst in &d.instances {
        if !other_ids.contains(&inst.category_id) {
            continue;
        }
        match (side_of[&inst.image_id], inst.provenance.kind) {
            (s, ProvenanceKind::GroundTruth) if s == side.other() => human += 1,
            (s, k) if s == side && k != ProvenanceKind::GroundTruth => pseudo += inst.provenance.score.unwrap_or(1.0),
            _ => {}
        }
    }
    if human == 0 {
        return 0.0;
    }
    ((pseudo / n_imgs(side)) / (human as f64 / n_imgs(side.other()))).min(1.0)
}

impl DetectionSource for SimulatedSource<'_> {
    fn detections(&mut self, round: usize, previous: Option<&MergeOutput>) -> Result<DetectionPair> {
        match previous {
            Some(prev) if round > 1 => {
                let det_b = self.detector_b.adapted(pseudo_label_coverage(prev, Side::A));
                let det_a = self.detector_a.adapted(pseudo_label_coverage(prev, Side::B));
                self.run(&det_a, &det_b)
            }
            _ => self.run(&self.detector_a.clone(), &self.detector_b.clone()),
        }
    }
}

/// Hidden ground truth re-expressed with the merged dataset's image and
/// category ids.
fn hidden_in_merged_frame(env: &Environment, out: &MergeOutput) -> Dataset {
    let merged = &out.merged.dataset;
    let cat_by_name: BTreeMap<&str, u64> = merged.categories.iter().map(|c| (c.name.as_str(), c.id)).collect();
    let hidden_names: BTreeMap<u64, &str> = env.hidden.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
    let image_map: BTreeMap<u64, u64> =
        merged.images.iter().zip(&out.merged.origins).map(|(img, o)| (o.original_id, img.id)).collect();
    let instances = env
        .hidden
        .instances
        .iter()
        .filter_map(|i| {
            let category_id = *cat_by_name.get(hidden_names[&i.category_id])?;
            Some(Instance { image_id: *image_map.get(&i.image_id)?, category_id, ..i.clone() })
        })
        .collect();
    Dataset { images: merged.images.clone(), categories: merged.categories.clone(), instances }
}

/// A variant's training targets scored as detections: human labels at 1,
/// predictions at their detector score.
pub fn targets_as_detections(d: &Dataset, variant: Variant) -> DetectionSet {
    DetectionSet::new(
        d.instances
            .iter()
            .filter(|i| variant.keeps(i.provenance.kind))
            .map(|i| Detection {
                image_id: i.image_id,
                category_id: i.category_id,
                bbox: i.bbox,
                score: i.provenance.score.unwrap_or(1.0),
            })
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnrichmentQuality {
    /// Predictions kept as targets.
    pub added: usize,
    /// Hidden objects of categories the image's source does not annotate.
    pub missing: usize,
    pub matched: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Categories annotated by each merged image's source dataset.
fn annotated_categories(out: &MergeOutput) -> BTreeMap<u64, BTreeSet<u64>> {
    let per_side = |side: Side| -> BTreeSet<u64> {
        out.taxonomy.source(side).iter().filter_map(|c| out.taxonomy.id_of(&c.name)).collect()
    };
    let (cats_a, cats_b) = (per_side(Side::A), per_side(Side::B));
    out.merged
        .dataset
        .images
        .iter()
        .zip(&out.merged.origins)
        .map(|(img, o)| (img.id, if o.side == Side::A { cats_a.clone() } else { cats_b.clone() }))
        .collect()
}

/// Precision and recall (percentages) of a variant's added targets against
/// the hidden objects the human labels cannot cover. Greedy matching at
/// IoU ≥ 0.5 per category, in descending score order.
pub fn enrichment_quality(out: &MergeOutput, hidden: &Dataset, variant: Variant) -> EnrichmentQuality {
    let annotated = annotated_categories(out);
    let merged = &out.merged.dataset;
    let (mut added, mut missing, mut matched) = (0, 0, 0);
    for cat in &merged.categories {
        let preds: Vec<Detection> = targets_as_detections(merged, variant)
            .detections
            .into_iter()
            .filter(|d| d.category_id == cat.id && d_is_prediction(merged, d))
            .collect();
        let gts: Vec<&Instance> = hidden
            .instances
            .iter()
            .filter(|h| h.category_id == cat.id && !annotated.get(&h.image_id).is_some_and(|s| s.contains(&cat.id)))
            .collect();
        let refs: Vec<&Detection> = preds.iter().collect();
        let (ranked, n) = match_category(&refs, &gts, 0.5);
        added += preds.len();
        missing += n;
        matched += ranked.iter().filter(|r| r.matched_iou.is_some()).count();
    }
    EnrichmentQuality {
        added,
        missing,
        matched,
        precision: (added > 0).then(|| 100.0 * matched as f64 / added as f64),
        recall: (missing > 0).then(|| 100.0 * matched as f64 / missing as f64),
    }
}

// human labels are scored exactly 1.0 and predictions never carry score None
fn d_is_prediction(merged: &Dataset, d: &Detection) -> bool {
    merged.instances.iter().any(|i| {
        !i.provenance.is_ground_truth()
            && i.image_id == d.image_id
            && i.category_id == d.category_id
            && i.bbox == d.bbox
    })
}

/// Assignment counts summed over all images.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssignmentStats {
    pub images: usize,
    pub anchors_positive: usize,
    pub anchors_negative: usize,
    pub anchors_undefined: usize,
    /// Negative anchors overlapping a hidden object at the RPN positive threshold.
    pub anchors_false_negative: usize,
    pub rois: usize,
    pub rois_positive: usize,
    pub rois_unsafe: usize,
    pub rois_background: usize,
    pub sampled_positive: usize,
    pub sampled_unsafe: usize,
    pub sampled_background: usize,
    /// Sampled background ROIs overlapping a hidden object at the ROI positive threshold.
    pub sampled_false_background: usize,
}

/// Mean losses of probe logits over the sampled ROIs of the probe images.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeLoss {
    pub batches: usize,
    pub categorical: f64,
    pub binary: f64,
    /// The loss the variant optimizes.
    pub objective: f64,
}

/// Logit bonus of the hidden true class in probe rows.
const PROBE_MARGIN: f64 = 3.0;
const PROPOSAL_JITTER: f64 = 0.15;
const PROPOSALS_PER_OBJECT: usize = 4;
const RANDOM_PROPOSALS: usize = 32;

/// Proposals shared by all variants: jittered copies of the given objects
/// plus random boxes, seeded per image.
pub fn proposals(img: &Image, hidden: &[&Instance], seed: u64) -> Vec<BBox> {
    let mut rng = rng_for(seed, STREAM_ROIS, img.id);
    let (wi, hi) = (img.width as f64, img.height as f64);
    let mut out = Vec::new();
    for inst in hidden {
        for _ in 0..PROPOSALS_PER_OBJECT {
            let z: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let b = inst.bbox;
            let w = b.w * (PROPOSAL_JITTER * z[2]).exp();
            let h = b.h * (PROPOSAL_JITTER * z[3]).exp();
            let x = b.x + PROPOSAL_JITTER * b.w * z[0] + (b.w - w) / 2.0;
            let y = b.y + PROPOSAL_JITTER * b.h * z[1] + (b.h - h) / 2.0;
            out.extend((BBox { x, y, w, h }).clamp_to(wi, hi));
        }
    }
    let side_max = 0.4 * wi.min(hi);
    for _ in 0..RANDOM_PROPOSALS {
        let w = rng.random_range(0.1 * side_max..=side_max);
        let h = rng.random_range(0.1 * side_max..=side_max);
        let x = rng.random_range(0.0..=wi - w);
        let y = rng.random_range(0.0..=hi - h);
        out.push(BBox { x, y, w, h });
    }
    out
}

fn probe_logits(rng: &mut ChaCha8Rng, truth: &[usize], cols: usize) -> Array2<f64> {
    let mut logits = Array2::from_shape_fn((truth.len(), cols), |_| rng.sample::<f64, _>(StandardNormal));
    for (r, &t) in truth.iter().enumerate() {
        logits[[r, t]] += PROBE_MARGIN;
    }
    logits
}

fn assignment_stats(
    out: &MergeOutput,
    hidden: &Dataset,
    variant: Variant,
    cfg: &ExperimentConfig,
) -> Result<(AssignmentStats, ProbeLoss)> {
    let merged = &out.merged.dataset;
    let acfg = AssignConfig { unsafe_sampling: variant.unsafe_sampling(), ..cfg.assign.clone() };
    acfg.validate()?;
    let by_image = merged.instances_by_image();
    let hidden_by_image = hidden.instances_by_image();
    let mut s = AssignmentStats::default();
    let mut probe = ProbeLoss::default();

    for (k, img) in merged.images.iter().enumerate() {
        let own: Vec<Instance> = by_image.get(&img.id).map(|v| variant.assignment_instances(v)).unwrap_or_default();
        let truth: Vec<&Instance> = hidden_by_image.get(&img.id).cloned().unwrap_or_default();
        let seed = derive_seed(acfg.seed, crate::seed::STREAM_SAMPLING, img.id);
        s.images += 1;

        let anchors =
            anchor_grid(img.width as f64, img.height as f64, cfg.anchor_stride, &cfg.anchor_sizes, &cfg.anchor_ratios);
        let labels = assign_anchors(&anchors, &own, &acfg);
        for (a, l) in anchors.iter().zip(&labels) {
            match l {
                AnchorLabel::Positive => s.anchors_positive += 1,
                AnchorLabel::Undefined => s.anchors_undefined += 1,
                AnchorLabel::Negative => {
                    s.anchors_negative += 1;
                    if truth.iter().any(|t| iou(a, &t.bbox) >= acfg.rpn_pos_iou) {
                        s.anchors_false_negative += 1;
                    }
                }
            }
        }
        // the RPN sample only checks that sampling succeeds under this variant
        let _ = sample_rpn(&labels, &acfg, seed);

        let rois = proposals(img, &truth, cfg.seed);
        let targets = assign_rois(&rois, &own, &merged.categories, &acfg)?;
        s.rois += targets.rois.len();
        for t in &targets.rois {
            if t.is_unsafe() {
                s.rois_unsafe += 1;
            } else if t.is_positive() {
                s.rois_positive += 1;
            } else {
                s.rois_background += 1;
            }
        }
        let Ok(sample) = sample_rois(&targets, &acfg, seed) else { continue };
        let indices = sample.indices();
        let mut true_class = Vec::with_capacity(indices.len());
        for &i in &indices {
            let t = &targets.rois[i];
            let best = truth
                .iter()
                .map(|h| (iou(&rois[i], &h.bbox), h.category_id))
                .filter(|(v, _)| *v >= acfg.roi_pos_iou)
                .fold(None::<(f64, u64)>, |acc, x| match acc {
                    Some(a) if a.0 >= x.0 => Some(a),
                    _ => Some(x),
                });
            if t.is_unsafe() {
                s.sampled_unsafe += 1;
            } else if t.is_positive() {
                s.sampled_positive += 1;
            } else {
                s.sampled_background += 1;
                if best.is_some() {
                    s.sampled_false_background += 1;
                }
            }
            let col = best
                .and_then(|(_, c)| targets.columns.iter().position(|&x| x == c))
                .unwrap_or(targets.background_index());
            true_class.push(col);
        }

        if k < cfg.probe_images {
            let mut rng = rng_for(cfg.seed, STREAM_PROBE, img.id);
            let logits = probe_logits(&mut rng, &true_class, targets.num_categories + 1);
            let batch = LossBatch::from_roi_targets(&targets, &indices, logits, 1.0)?;
            let cat = categorical_loss(&batch)?;
            let bin = binary_loss(&batch)?;
            probe.batches += 1;
            probe.categorical += cat;
            probe.binary += bin;
            probe.objective += match variant {
                Variant::Softsig => softsig_loss(&batch)?,
                _ => cat,
            };
        }
    }
    if probe.batches > 0 {
        let n = probe.batches as f64;
        probe.categorical /= n;
        probe.binary /= n;
        probe.objective /= n;
    }
    Ok((s, probe))
}

/// Headline numbers of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub variant: Variant,
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
    #[serde(rename = "MoLRP")]
    pub molrp: Option<f64>,
    pub enrichment: EnrichmentQuality,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmReport {
    #[serde(flatten)]
    pub summary: ArmSummary,
    pub targets: usize,
    pub eval: EvalReport,
    pub assignment: AssignmentStats,
    pub probe: ProbeLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub threshold_high: f64,
    pub arms: Vec<ArmSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    /// Pseudo-label coverage on A's and B's images.
    pub coverage_a: f64,
    pub coverage_b: f64,
    pub merge: MergeStats,
    pub arms: Vec<ArmSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub hidden_images: usize,
    pub hidden_instances: usize,
    pub merge: MergeStats,
    pub arms: Vec<ArmReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepPoint>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub rounds: Vec<RoundReport>,
    pub config: ExperimentConfig,
}

impl ExperimentReport {
    pub fn arm(&self, v: Variant) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.summary.variant == v)
    }
}

fn summarize(out: &MergeOutput, hidden: &Dataset, v: Variant) -> Result<(ArmSummary, EvalReport, usize)> {
    let targets = targets_as_detections(&out.merged.dataset, v);
    let eval = evaluate(&targets, hidden, 0.5, 0.5)?;
    let summary =
        ArmSummary { variant: v, map: eval.map, molrp: eval.molrp, enrichment: enrichment_quality(out, hidden, v) };
    Ok((summary, eval, targets.len()))
}

fn summaries(env: &Environment, out: &MergeOutput, variants: &[Variant]) -> Result<Vec<ArmSummary>> {
    let hidden = hidden_in_merged_frame(env, out);
    variants.iter().map(|&v| Ok(summarize(out, &hidden, v)?.0)).collect()
}

/// Runs the full experiment: one merge per configuration, every variant
/// scored against the hidden annotation, plus the optional threshold sweep
/// and self-training rounds.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let env = Environment::build(cfg)?;
    debug_assert!(validate(&env.hidden).is_empty());
    let mut source = SimulatedSource::new(&env, cfg);
    let pair = source.detections(1, None)?;
    let out = merge_pair(&env.dataset_a, &env.dataset_b, &pair, &cfg.merge_config(cfg.selection.clone()))?;
    let hidden = hidden_in_merged_frame(&env, &out);

    let mut arms = Vec::new();
    for &v in &cfg.variants {
        let (summary, eval, targets) = summarize(&out, &hidden, v)?;
        let (assignment, probe) = assignment_stats(&out, &hidden, v, cfg)?;
        tracing::debug!(variant = ?v, map = ?summary.map, "arm evaluated");
        arms.push(ArmReport { summary, targets, eval, assignment, probe });
    }

    let mut sweep = Vec::new();
    for &h in &cfg.sweep {
        let sel = SelectionConfig { threshold_high: h, ..cfg.selection.clone() };
        let o = merge_pair(&env.dataset_a, &env.dataset_b, &pair, &cfg.merge_config(sel))?;
        sweep.push(SweepPoint { threshold_high: h, arms: summaries(&env, &o, &cfg.variants)? });
    }

    let rounds = if cfg.rounds > 1 { run_rounds_in(&env, cfg)? } else { Vec::new() };

    Ok(ExperimentReport {
        seed: cfg.seed,
        hidden_images: env.hidden.images.len(),
        hidden_instances: env.hidden.instances.len(),
        merge: out.stats(),
        arms,
        sweep,
        rounds,
        config: cfg.clone(),
    })
}

/// Self-training rounds with the simulated detectors.
pub fn run_rounds(cfg: &ExperimentConfig) -> Result<Vec<RoundReport>> {
    cfg.validate()?;
    let env = Environment::build(cfg)?;
    run_rounds_in(&env, cfg)
}

fn run_rounds_in(env: &Environment, cfg: &ExperimentConfig) -> Result<Vec<RoundReport>> {
    let mut source = SimulatedSource::new(env, cfg);
    let outs =
        iterate(&env.dataset_a, &env.dataset_b, &mut source, cfg.rounds, &cfg.merge_config(cfg.selection.clone()))?;
    outs.iter()
        .enumerate()
        .map(|(k, o)| {
            Ok(RoundReport {
                round: k + 1,
                coverage_a: pseudo_label_coverage(o, Side::A),
                coverage_b: pseudo_label_coverage(o, Side::B),
                merge: o.stats(),
                arms: summaries(env, o, &cfg.variants)?,
            })
        })
        .collect()
}
