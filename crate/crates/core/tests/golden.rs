//! Assignment dump compared byte-for-byte against a checked-in file.
//! Regenerate with `OMNIA_UPDATE_GOLDEN=1 cargo test --test golden`.

use std::path::PathBuf;

use omnia::annotations::{BBox, Category, Instance, Provenance};
use omnia::assignment::{anchor_grid, assign_image, AnchorLabel, AssignConfig, AssignmentDump};

fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
    BBox::new(x, y, w, h).unwrap()
}

fn fixture() -> AssignmentDump {
    let categories = vec![Category::new(1, "car"), Category::new(2, "person")];
    let instances = vec![
        Instance {
            id: 1,
            image_id: 7,
            category_id: 1,
            bbox: bx(0.0, 0.0, 32.0, 32.0),
            provenance: Provenance::GROUND_TRUTH,
        },
        Instance {
            id: 2,
            image_id: 7,
            category_id: 2,
            bbox: bx(32.0, 32.0, 32.0, 32.0),
            provenance: Provenance::unsafe_prediction(0.6),
        },
        Instance {
            id: 3,
            image_id: 7,
            category_id: 2,
            bbox: bx(40.0, 0.0, 20.0, 28.0),
            provenance: Provenance::safe(0.95),
        },
    ];
    let anchors = anchor_grid(64.0, 64.0, 16.0, &[16.0, 32.0], &[1.0]);
    let rois = vec![
        bx(0.0, 0.0, 32.0, 32.0),
        bx(2.0, 2.0, 30.0, 30.0),
        bx(32.0, 32.0, 32.0, 32.0),
        bx(36.0, 30.0, 28.0, 30.0),
        bx(40.0, 0.0, 20.0, 28.0),
        bx(0.0, 40.0, 20.0, 20.0),
        bx(20.0, 20.0, 10.0, 10.0),
        bx(16.0, 0.0, 40.0, 40.0),
    ];
    let cfg = AssignConfig { rpn_batch: 16, roi_batch: 8, ..Default::default() };
    assign_image(7, anchors, rois, &instances, &categories, &cfg).unwrap()
}

#[test]
fn assignment_dump_matches_golden_file() {
    let dump = fixture();

    // hand-checkable facts independent of the golden file
    assert_eq!(dump.roi_targets.rois[0].class_index, 0);
    assert_eq!(dump.roi_targets.rois[2].mask, 0);
    assert_eq!(dump.roi_targets.rois[2].weights, vec![1, 0, 0]);
    assert_eq!(dump.roi_targets.rois[4].class_index, 1);
    assert_eq!(dump.roi_targets.rois[5].class_index, 2);
    let rpn = dump.rpn_sample.as_ref().unwrap();
    assert!(rpn.indices().iter().all(|&i| dump.anchor_labels[i] != AnchorLabel::Undefined));

    let text = serde_json::to_string_pretty(&dump).unwrap() + "\n";
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/assign_dump.json");
    if std::env::var_os("OMNIA_UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &text).unwrap();
    }
    let golden = std::fs::read_to_string(&path).expect("golden file exists");
    assert_eq!(text, golden, "assignment dump drifted from {}", path.display());
}
