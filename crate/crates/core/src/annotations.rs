//! Dataset data model, the annotation/detection JSON formats and box geometry.
//!
//! Boxes use the `[x, y, w, h]` convention with continuous coordinates and
//! `area = w * h`. Category identity across datasets is the canonical
//! (trimmed, lowercase) name.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixels, `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { x, y, w, h };
        b.check().map_err(|message| Error::Geometry { entity: format!("box [{x}, {y}, {w}, {h}]"), message })?;
        Ok(b)
    }

    fn check(&self) -> std::result::Result<(), String> {
        if ![self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err("coordinates must be finite".into());
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(format!("width and height must be positive, got w={} h={}", self.w, self.h));
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.check().is_ok()
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        BBox::new(x1, y1, x2 - x1, y2 - y1)
    }

    #[inline]
    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    #[inline]
    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.x2().min(other.x2()) - self.x.max(other.x);
        let ih = self.y2().min(other.y2()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }

    /// Clips the box to `[0, width] x [0, height]`. `None` when nothing is left.
    pub fn clamp_to(&self, width: f64, height: f64) -> Option<BBox> {
        let x1 = self.x.clamp(0.0, width);
        let y1 = self.y.clamp(0.0, height);
        let x2 = self.x2().clamp(0.0, width);
        let y2 = self.y2().clamp(0.0, height);
        if x2 - x1 > 0.0 && y2 - y1 > 0.0 {
            if x1 == self.x && y1 == self.y && x2 == self.x2() && y2 == self.y2() {
                Some(*self)
            } else {
                Some(BBox { x: x1, y: y1, w: x2 - x1, h: y2 - y1 })
            }
        } else {
            None
        }
    }

    pub fn is_within(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x2() <= width && self.y2() <= height
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = String;

    fn try_from(v: [f64; 4]) -> std::result::Result<Self, Self::Error> {
        let b = BBox { x: v[0], y: v[1], w: v[2], h: v[3] };
        b.check().map(|_| b)
    }
}

/// Intersection over union. Zero for disjoint or edge-touching boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    // x + w - x can differ from w in the last bit
    if a == b && a.area() > 0.0 {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

impl Category {
    pub fn new(id: u64, name: &str) -> Self {
        Category { id, name: canonical_name(name) }
    }
}

pub fn canonical_name(name: &str) -> String {
    name.trim().to_lowercase()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProvenanceKind {
    #[serde(rename = "gt")]
    GroundTruth,
    #[serde(rename = "safe")]
    SafePrediction,
    #[serde(rename = "unsafe")]
    UnsafePrediction,
}

impl ProvenanceKind {
    pub fn is_trusted(self) -> bool {
        matches!(self, ProvenanceKind::GroundTruth | ProvenanceKind::SafePrediction)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Provenance {
    pub kind: ProvenanceKind,
    pub score: Option<f64>,
}

impl Provenance {
    pub const GROUND_TRUTH: Provenance = Provenance { kind: ProvenanceKind::GroundTruth, score: None };

    pub fn safe(score: f64) -> Self {
        Provenance { kind: ProvenanceKind::SafePrediction, score: Some(score) }
    }

    pub fn unsafe_prediction(score: f64) -> Self {
        Provenance { kind: ProvenanceKind::UnsafePrediction, score: Some(score) }
    }

    pub fn is_ground_truth(&self) -> bool {
        self.kind == ProvenanceKind::GroundTruth
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub domain_tag: String,
    /// Relative draw weight when sampling training images from a merged dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_weight: Option<f64>,
}

impl Image {
    pub fn new(id: u64, width: u32, height: u32, domain_tag: &str) -> Self {
        Image { id, width, height, domain_tag: domain_tag.to_string(), sampling_weight: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub categories: Vec<Category>,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn category_by_name(&self, name: &str) -> Option<&Category> {
        let name = canonical_name(name);
        self.categories.iter().find(|c| c.name == name)
    }

    pub fn category(&self, id: u64) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn image(&self, id: u64) -> Option<&Image> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn category_names(&self) -> BTreeSet<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    pub fn ground_truth(&self) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(|i| i.provenance.is_ground_truth())
    }

    /// Instances grouped by image id, in instance order.
    pub fn instances_by_image(&self) -> BTreeMap<u64, Vec<&Instance>> {
        let mut map: BTreeMap<u64, Vec<&Instance>> = BTreeMap::new();
        for img in &self.images {
            map.entry(img.id).or_default();
        }
        for inst in &self.instances {
            map.entry(inst.image_id).or_default().push(inst);
        }
        map
    }

    pub fn next_instance_id(&self) -> u64 {
        self.instances.iter().map(|i| i.id).max().map_or(1, |m| m + 1)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&RawDataset::from(self)).expect("dataset serializes")
    }
}

/// One invariant violation found by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DuplicateCategoryId(u64),
    DuplicateCategoryName(String),
    InvalidCategoryName { id: u64, name: String },
    ZeroCategoryId,
    DuplicateImageId(u64),
    DuplicateInstanceId(u64),
    UnknownImage { instance: u64, image: u64 },
    UnknownCategory { instance: u64, category: u64 },
    InvalidBox { instance: u64 },
    BoxOutsideImage { instance: u64, image: u64 },
    GroundTruthWithScore { instance: u64 },
    PredictionScore { instance: u64, score: Option<f64> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            DuplicateCategoryId(id) => write!(f, "category id {id} is not unique"),
            DuplicateCategoryName(n) => write!(f, "category name '{n}' is not unique"),
            InvalidCategoryName { id, name } => {
                write!(f, "category {id} has a non-canonical or empty name '{name}'")
            }
            ZeroCategoryId => write!(f, "category id 0 is reserved"),
            DuplicateImageId(id) => write!(f, "image id {id} is not unique"),
            DuplicateInstanceId(id) => write!(f, "instance id {id} is not unique"),
            UnknownImage { instance, image } => {
                write!(f, "instance {instance} references unknown image {image}")
            }
            UnknownCategory { instance, category } => {
                write!(f, "instance {instance} references unknown category {category}")
            }
            InvalidBox { instance } => write!(f, "instance {instance} has a degenerate or non-finite box"),
            BoxOutsideImage { instance, image } => {
                write!(f, "instance {instance} lies outside image {image}")
            }
            GroundTruthWithScore { instance } => {
                write!(f, "ground-truth instance {instance} carries a score")
            }
            PredictionScore { instance, score } => {
                write!(f, "prediction {instance} has score {score:?}, expected a value in (0, 1]")
            }
        }
    }
}

/// Checks every dataset invariant. Empty iff the dataset is valid.
pub fn validate(d: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();

    let mut cat_ids = BTreeSet::new();
    let mut cat_names = BTreeSet::new();
    for c in &d.categories {
        if c.id == 0 {
            out.push(Violation::ZeroCategoryId);
        }
        if !cat_ids.insert(c.id) {
            out.push(Violation::DuplicateCategoryId(c.id));
        }
        if c.name.is_empty() || c.name != canonical_name(&c.name) {
            out.push(Violation::InvalidCategoryName { id: c.id, name: c.name.clone() });
        }
        if !cat_names.insert(c.name.as_str()) {
            out.push(Violation::DuplicateCategoryName(c.name.clone()));
        }
    }

    let mut images = BTreeMap::new();
    for img in &d.images {
        if images.insert(img.id, img).is_some() {
            out.push(Violation::DuplicateImageId(img.id));
        }
    }

    let mut inst_ids = BTreeSet::new();
    for inst in &d.instances {
        if !inst_ids.insert(inst.id) {
            out.push(Violation::DuplicateInstanceId(inst.id));
        }
        if !cat_ids.contains(&inst.category_id) {
            out.push(Violation::UnknownCategory { instance: inst.id, category: inst.category_id });
        }
        if !inst.bbox.is_valid() {
            out.push(Violation::InvalidBox { instance: inst.id });
        }
        match images.get(&inst.image_id) {
            None => out.push(Violation::UnknownImage { instance: inst.id, image: inst.image_id }),
            Some(img) => {
                if inst.bbox.is_valid() && !inst.bbox.is_within(img.width as f64, img.height as f64) {
                    out.push(Violation::BoxOutsideImage { instance: inst.id, image: img.id });
                }
            }
        }
        match inst.provenance.kind {
            ProvenanceKind::GroundTruth => {
                if inst.provenance.score.is_some() {
                    out.push(Violation::GroundTruthWithScore { instance: inst.id });
                }
            }
            _ => {
                let ok = matches!(inst.provenance.score, Some(s) if s > 0.0 && s <= 1.0);
                if !ok {
                    out.push(Violation::PredictionScore { instance: inst.id, score: inst.provenance.score });
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// File formats

#[derive(Debug, Serialize, Deserialize)]
struct RawDataset {
    images: Vec<Image>,
    categories: Vec<Category>,
    #[serde(default)]
    annotations: Vec<RawAnnotation>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<ProvenanceKind>,
}

impl From<&Dataset> for RawDataset {
    fn from(d: &Dataset) -> Self {
        RawDataset {
            images: d.images.clone(),
            categories: d.categories.clone(),
            annotations: d
                .instances
                .iter()
                .map(|i| RawAnnotation {
                    id: i.id,
                    image_id: i.image_id,
                    category_id: i.category_id,
                    bbox: i.bbox.into(),
                    score: i.provenance.score,
                    provenance: match i.provenance.kind {
                        ProvenanceKind::GroundTruth => None,
                        k => Some(k),
                    },
                })
                .collect(),
        }
    }
}

fn geometry_error(entity: String, raw: [f64; 4], message: &str) -> Error {
    Error::Geometry { entity, message: format!("{message}: bbox {raw:?}") }
}

/// Parses and validates an annotation file. Boxes are clamped to image bounds.
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let raw: RawDataset = serde_json::from_str(text)?;

    let categories: Vec<Category> = raw.categories.iter().map(|c| Category::new(c.id, &c.name)).collect();
    let images: BTreeMap<u64, &Image> = raw.images.iter().map(|i| (i.id, i)).collect();
    let cat_ids: BTreeSet<u64> = categories.iter().map(|c| c.id).collect();

    let mut instances = Vec::with_capacity(raw.annotations.len());
    for a in &raw.annotations {
        let entity = format!("annotation {}", a.id);
        let img = images.get(&a.image_id).ok_or_else(|| Error::Reference {
            entity: entity.clone(),
            kind: "image",
            id: a.image_id,
        })?;
        if !cat_ids.contains(&a.category_id) {
            return Err(Error::Reference { entity, kind: "category", id: a.category_id });
        }
        let bbox = BBox::try_from(a.bbox).map_err(|m| geometry_error(entity.clone(), a.bbox, &m))?;
        let bbox = bbox
            .clamp_to(img.width as f64, img.height as f64)
            .ok_or_else(|| geometry_error(entity.clone(), a.bbox, "box lies outside its image"))?;
        instances.push(Instance {
            id: a.id,
            image_id: a.image_id,
            category_id: a.category_id,
            bbox,
            provenance: Provenance { kind: a.provenance.unwrap_or(ProvenanceKind::GroundTruth), score: a.score },
        });
    }

    let dataset = Dataset { images: raw.images, categories, instances };
    let violations = validate(&dataset);
    if violations.is_empty() {
        Ok(dataset)
    } else {
        Err(Error::Invalid(violations))
    }
}

/// A raw scored detector output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    pub score: f64,
}

/// Detector outputs for a set of images, prior to selection.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn new(detections: Vec<Detection>) -> Self {
        DetectionSet { detections }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let detections: Vec<Detection> = serde_json::from_str(text)?;
        for (i, d) in detections.iter().enumerate() {
            if !(d.score > 0.0 && d.score <= 1.0) {
                return Err(Error::Geometry {
                    entity: format!("detection {i}"),
                    message: format!("score {} outside (0, 1]", d.score),
                });
            }
        }
        Ok(DetectionSet { detections })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.detections).expect("detections serialize")
    }

    /// Checks the detections against a taxonomy and image list, clamping
    /// boxes to their image.
    pub fn resolve(&self, categories: &[Category], images: &[Image]) -> Result<DetectionSet> {
        let images: BTreeMap<u64, &Image> = images.iter().map(|i| (i.id, i)).collect();
        let cat_ids: BTreeSet<u64> = categories.iter().map(|c| c.id).collect();
        let mut out = Vec::with_capacity(self.detections.len());
        for (i, d) in self.detections.iter().enumerate() {
            let entity = format!("detection {i}");
            let img = images.get(&d.image_id).ok_or_else(|| Error::Reference {
                entity: entity.clone(),
                kind: "image",
                id: d.image_id,
            })?;
            if !cat_ids.contains(&d.category_id) {
                return Err(Error::Reference { entity, kind: "category", id: d.category_id });
            }
            let bbox = d
                .bbox
                .clamp_to(img.width as f64, img.height as f64)
                .ok_or_else(|| geometry_error(entity, d.bbox.into(), "box lies outside its image"))?;
            out.push(Detection { bbox, ..d.clone() });
        }
        Ok(DetectionSet { detections: out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    const MINIMAL: &str = r#"{
        "images": [{"id": 1, "width": 100, "height": 80}],
        "categories": [{"id": 1, "name": "Car"}],
        "annotations": []
    }"#;

    #[test]
    fn minimal_file_has_no_instances() {
        let d = parse_dataset(MINIMAL).unwrap();
        assert!(d.instances.is_empty());
        assert_eq!(d.categories[0].name, "car");
        assert_eq!(d.images[0].width, 100);
    }

    #[test]
    fn dangling_category_is_reported() {
        let text = r#"{
            "images": [{"id": 1, "width": 100, "height": 80}],
            "categories": [{"id": 1, "name": "car"}],
            "annotations": [{"id": 5, "image_id": 1, "category_id": 99, "bbox": [1, 1, 5, 5]}]
        }"#;
        match parse_dataset(text) {
            Err(Error::Reference { kind, id, .. }) => {
                assert_eq!(kind, "category");
                assert_eq!(id, 99);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_width_box_is_a_geometry_error() {
        let text = r#"{
            "images": [{"id": 1, "width": 100, "height": 80}],
            "categories": [{"id": 1, "name": "car"}],
            "annotations": [{"id": 5, "image_id": 1, "category_id": 1, "bbox": [10, 10, 0, 5]}]
        }"#;
        assert!(matches!(parse_dataset(text), Err(Error::Geometry { .. })));
    }

    #[test]
    fn malformed_json_reports_position() {
        let err = parse_dataset("{\n  \"images\": [,]\n}").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn boxes_overshooting_the_border_are_clamped() {
        let text = r#"{
            "images": [{"id": 1, "width": 100, "height": 80}],
            "categories": [{"id": 1, "name": "car"}],
            "annotations": [{"id": 1, "image_id": 1, "category_id": 1, "bbox": [-10, 70, 30, 20]}]
        }"#;
        let d = parse_dataset(text).unwrap();
        assert_eq!(d.instances[0].bbox, b(0.0, 70.0, 20.0, 10.0));
        assert!(d.instances[0].provenance.is_ground_truth());
    }

    #[test]
    fn provenance_and_score_are_read() {
        let text = r#"{
            "images": [{"id": 1, "width": 100, "height": 80, "domain_tag": "coco"}],
            "categories": [{"id": 1, "name": "car"}],
            "annotations": [{"id": 1, "image_id": 1, "category_id": 1, "bbox": [1, 1, 3, 3],
                             "score": 0.5, "provenance": "unsafe"}]
        }"#;
        let d = parse_dataset(text).unwrap();
        assert_eq!(d.instances[0].provenance, Provenance::unsafe_prediction(0.5));
        assert_eq!(d.images[0].domain_tag, "coco");
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert_eq!(iou(&a, &b(1.0, 0.0, 2.0, 2.0)), 2.0 / 6.0);
        // touching edges do not overlap
        assert_eq!(iou(&a, &b(2.0, 0.0, 2.0, 2.0)), 0.0);
    }

    fn valid_dataset() -> Dataset {
        Dataset {
            images: vec![Image::new(1, 50, 50, "")],
            categories: vec![Category::new(1, "bag"), Category::new(2, "tie")],
            instances: vec![Instance {
                id: 1,
                image_id: 1,
                category_id: 2,
                bbox: b(1.0, 1.0, 10.0, 10.0),
                provenance: Provenance::GROUND_TRUTH,
            }],
        }
    }

    #[test]
    fn validate_accepts_valid_dataset() {
        assert!(validate(&valid_dataset()).is_empty());
    }

    #[test]
    fn validate_flags_duplicate_names() {
        let mut d = valid_dataset();
        d.categories.push(Category::new(3, "bag"));
        assert_eq!(validate(&d), vec![Violation::DuplicateCategoryName("bag".into())]);
    }

    #[test]
    fn validate_flags_scored_ground_truth() {
        let mut d = valid_dataset();
        d.instances[0].provenance.score = Some(0.4);
        assert_eq!(validate(&d), vec![Violation::GroundTruthWithScore { instance: 1 }]);
    }

    #[test]
    fn detection_file_parses_and_resolves() {
        let text = r#"[{"image_id": 1, "category_id": 1, "bbox": [90, 0, 20, 10], "score": 0.9}]"#;
        let dets = DetectionSet::parse(text).unwrap();
        let d = parse_dataset(MINIMAL).unwrap();
        let resolved = dets.resolve(&d.categories, &d.images).unwrap();
        assert_eq!(resolved.detections[0].bbox, b(90.0, 0.0, 10.0, 10.0));

        let bad = r#"[{"image_id": 7, "category_id": 1, "bbox": [0, 0, 2, 2], "score": 0.9}]"#;
        let err = DetectionSet::parse(bad).unwrap().resolve(&d.categories, &d.images).unwrap_err();
        assert!(matches!(err, Error::Reference { kind: "image", id: 7, .. }));
    }

    #[test]
    fn detection_scores_must_be_probabilities() {
        let text = r#"[{"image_id": 1, "category_id": 1, "bbox": [0, 0, 2, 2], "score": 0.0}]"#;
        assert!(DetectionSet::parse(text).is_err());
    }
}
