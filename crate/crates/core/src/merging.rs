//! Union taxonomy, dataset enrichment with complementary predictions, and
//! the merge/iterate orchestration.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::annotations::{validate, Category, Dataset, DetectionSet, Image, Instance};
use crate::error::{Error, Result};
use crate::selection::{select, SelectionConfig, SelectionStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    A,
    B,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }
}

/// How categories labeled in both datasets are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SharedPolicy {
    /// Keep both sides' human labels and drop every prediction of the category.
    #[serde(rename = "keep_gt")]
    KeepGroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub selection: SelectionConfig,
    pub shared_policy: Option<SharedPolicy>,
    pub rounds: usize,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            selection: SelectionConfig::default(),
            shared_policy: Some(SharedPolicy::KeepGroundTruth),
            rounds: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergedTaxonomy {
    pub categories: Vec<Category>,
    pub remap_a: BTreeMap<u64, u64>,
    pub remap_b: BTreeMap<u64, u64>,
    pub shared: BTreeSet<String>,
    #[serde(skip)]
    source_a: Vec<Category>,
    #[serde(skip)]
    source_b: Vec<Category>,
}

impl MergedTaxonomy {
    pub fn remap(&self, side: Side) -> &BTreeMap<u64, u64> {
        match side {
            Side::A => &self.remap_a,
            Side::B => &self.remap_b,
        }
    }

    pub fn source(&self, side: Side) -> &[Category] {
        match side {
            Side::A => &self.source_a,
            Side::B => &self.source_b,
        }
    }

    pub fn id_of(&self, name: &str) -> Option<u64> {
        self.categories.iter().find(|c| c.name == name).map(|c| c.id)
    }
}

/// Union of two taxonomies by canonical name. Ids are reassigned densely
/// from 1 in sorted-name order.
pub fn build_taxonomy(cats_a: &[Category], cats_b: &[Category]) -> MergedTaxonomy {
    let names_a: BTreeSet<&str> = cats_a.iter().map(|c| c.name.as_str()).collect();
    let names_b: BTreeSet<&str> = cats_b.iter().map(|c| c.name.as_str()).collect();
    let all: BTreeSet<&str> = names_a.union(&names_b).copied().collect();

    let categories: Vec<Category> =
        all.iter().enumerate().map(|(i, name)| Category { id: i as u64 + 1, name: name.to_string() }).collect();
    let new_id: BTreeMap<&str, u64> = categories.iter().map(|c| (c.name.as_str(), c.id)).collect();
    let remap = |cats: &[Category]| cats.iter().map(|c| (c.id, new_id[c.name.as_str()])).collect();

    MergedTaxonomy {
        remap_a: remap(cats_a),
        remap_b: remap(cats_b),
        shared: names_a.intersection(&names_b).map(|s| s.to_string()).collect(),
        categories,
        source_a: cats_a.to_vec(),
        source_b: cats_b.to_vec(),
    }
}

/// A source dataset whose targets were completed with complementary predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct EnrichedDataset {
    pub dataset: Dataset,
    pub source: Side,
    pub sampling_weight: f64,
    pub selection: SelectionStats,
    /// Detections dropped because their category is labeled in both datasets.
    pub skipped_shared: usize,
}

/// Adds selected complementary predictions to `dataset` (the `side` source of
/// `taxonomy`). `detections` are expressed in the other source's taxonomy.
pub fn enrich(
    dataset: &Dataset,
    side: Side,
    detections: &DetectionSet,
    taxonomy: &MergedTaxonomy,
    cfg: &MergeConfig,
) -> Result<EnrichedDataset> {
    if !taxonomy.shared.is_empty() && cfg.shared_policy.is_none() {
        return Err(Error::Config(format!(
            "categories {:?} are labeled in both datasets but no shared-category policy is set",
            taxonomy.shared
        )));
    }
    if dataset.categories != taxonomy.source(side) {
        return Err(Error::TaxonomyMismatch(format!(
            "dataset {side:?} categories differ from the taxonomy it was built from"
        )));
    }
    let det_categories = taxonomy.source(side.other());
    let det_names: BTreeMap<u64, &str> = det_categories.iter().map(|c| (c.id, c.name.as_str())).collect();

    let mut skipped_shared = 0;
    let kept: Vec<_> = detections
        .detections
        .iter()
        .filter(|d| match det_names.get(&d.category_id) {
            Some(name) if taxonomy.shared.contains(*name) => {
                skipped_shared += 1;
                false
            }
            _ => true,
        })
        .cloned()
        .collect();

    let selection = select(&DetectionSet::new(kept), det_categories, dataset, &cfg.selection)?;

    let own_remap = taxonomy.remap(side);
    let other_remap = taxonomy.remap(side.other());
    let mut instances: Vec<Instance> =
        dataset.instances.iter().map(|i| Instance { category_id: own_remap[&i.category_id], ..i.clone() }).collect();
    instances
        .extend(selection.selected().into_iter().map(|i| Instance { category_id: other_remap[&i.category_id], ..i }));

    let enriched = Dataset { images: dataset.images.clone(), categories: taxonomy.categories.clone(), instances };
    let violations = validate(&enriched);
    if !violations.is_empty() {
        return Err(Error::Invalid(violations));
    }
    Ok(EnrichedDataset {
        dataset: enriched,
        source: side,
        sampling_weight: 1.0,
        selection: selection.stats,
        skipped_shared,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingWeights {
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageOrigin {
    pub side: Side,
    pub original_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedDataset {
    pub dataset: Dataset,
    pub weights: SamplingWeights,
    /// Origin of each image of `dataset`, index-aligned with `dataset.images`.
    pub origins: Vec<ImageOrigin>,
}

fn balance_weight(own: usize, larger: usize) -> f64 {
    if own == 0 {
        0.0
    } else {
        larger as f64 / own as f64
    }
}

/// Concatenates two enriched datasets with dense re-iding (images of `a`
/// first). Each source gets a per-image sampling weight of
/// `larger size / own size` so both sources are drawn equally often.
pub fn merge(a: &EnrichedDataset, b: &EnrichedDataset) -> Result<MergedDataset> {
    if a.dataset.categories != b.dataset.categories {
        return Err(Error::TaxonomyMismatch("enriched datasets were built against different taxonomies".into()));
    }
    let larger = a.dataset.images.len().max(b.dataset.images.len());
    let weights = SamplingWeights {
        a: balance_weight(a.dataset.images.len(), larger),
        b: balance_weight(b.dataset.images.len(), larger),
    };

    let mut images = Vec::new();
    let mut origins = Vec::new();
    let mut instances = Vec::new();
    for (part, weight) in [(a, weights.a), (b, weights.b)] {
        let mut image_map = BTreeMap::new();
        for img in &part.dataset.images {
            let id = images.len() as u64 + 1;
            image_map.insert(img.id, id);
            images.push(Image { id, sampling_weight: Some(weight), ..img.clone() });
            origins.push(ImageOrigin { side: part.source, original_id: img.id });
        }
        for inst in &part.dataset.instances {
            instances.push(Instance {
                id: instances.len() as u64 + 1,
                image_id: image_map[&inst.image_id],
                ..inst.clone()
            });
        }
    }

    Ok(MergedDataset {
        dataset: Dataset { images, categories: a.dataset.categories.clone(), instances },
        weights,
        origins,
    })
}

/// Per-side summary written to the merge stats file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SideStats {
    #[serde(flatten)]
    pub selection: SelectionStats,
    pub skipped_shared: usize,
    pub images: usize,
    pub instances: usize,
}

impl SideStats {
    fn of(e: &EnrichedDataset) -> Self {
        SideStats {
            selection: e.selection.clone(),
            skipped_shared: e.skipped_shared,
            images: e.dataset.images.len(),
            instances: e.dataset.instances.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeStats {
    pub categories: Vec<Category>,
    pub shared: BTreeSet<String>,
    pub a: SideStats,
    pub b: SideStats,
    pub sampling_weights: SamplingWeights,
}

#[derive(Debug, Clone)]
pub struct MergeOutput {
    pub taxonomy: MergedTaxonomy,
    pub enriched_a: EnrichedDataset,
    pub enriched_b: EnrichedDataset,
    pub merged: MergedDataset,
}

impl MergeOutput {
    pub fn stats(&self) -> MergeStats {
        MergeStats {
            categories: self.taxonomy.categories.clone(),
            shared: self.taxonomy.shared.clone(),
            a: SideStats::of(&self.enriched_a),
            b: SideStats::of(&self.enriched_b),
            sampling_weights: self.merged.weights,
        }
    }
}

/// Detections of the B-trained detector on A's images and of the A-trained
/// detector on B's images, each in its detector's taxonomy.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionPair {
    pub on_a: DetectionSet,
    pub on_b: DetectionSet,
}

/// Full single-round procedure: taxonomy, enrichment of both sides, merge.
pub fn merge_pair(a: &Dataset, b: &Dataset, detections: &DetectionPair, cfg: &MergeConfig) -> Result<MergeOutput> {
    let taxonomy = build_taxonomy(&a.categories, &b.categories);
    let enriched_a = enrich(a, Side::A, &detections.on_a, &taxonomy, cfg)?;
    let enriched_b = enrich(b, Side::B, &detections.on_b, &taxonomy, cfg)?;
    let merged = merge(&enriched_a, &enriched_b)?;
    Ok(MergeOutput { taxonomy, enriched_a, enriched_b, merged })
}

/// Supplies the complementary detections for each round of [`iterate`].
pub trait DetectionSource {
    /// `round` starts at 1; `previous` is the last round's output, if any.
    fn detections(&mut self, round: usize, previous: Option<&MergeOutput>) -> Result<DetectionPair>;
}

/// Pre-recorded detections, one pair per round.
#[derive(Debug, Clone, Default)]
pub struct RecordedDetections {
    pub rounds: Vec<DetectionPair>,
}

impl DetectionSource for RecordedDetections {
    fn detections(&mut self, round: usize, _previous: Option<&MergeOutput>) -> Result<DetectionPair> {
        self.rounds.get(round.wrapping_sub(1)).cloned().ok_or(Error::MissingRound { round })
    }
}

/// Repeats the merging procedure, each round drawing fresh detections from
/// `source`. The same configuration is used for every round.
pub fn iterate(
    a: &Dataset,
    b: &Dataset,
    source: &mut dyn DetectionSource,
    rounds: usize,
    cfg: &MergeConfig,
) -> Result<Vec<MergeOutput>> {
    if rounds == 0 {
        return Err(Error::Config("rounds must be a positive integer".into()));
    }
    let mut outputs: Vec<MergeOutput> = Vec::with_capacity(rounds);
    for round in 1..=rounds {
        let dets = source.detections(round, outputs.last())?;
        let out = merge_pair(a, b, &dets, cfg)?;
        tracing::info!(round, instances = out.merged.dataset.instances.len(), "merge round complete");
        outputs.push(out);
    }
    Ok(outputs)
}
