use std::path::Path;
use std::process::{Command, Output};

fn omnia(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_omnia"))
        .args(args)
        .current_dir(dir)
        .env_remove("OMNIA_LOG")
        .output()
        .expect("binary runs")
}

fn error_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr has a line");
    serde_json::from_str(line).expect("stderr is JSON")
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = omnia(&["--help"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["merge", "select", "assign", "eval", "gradcheck", "simulate", "iterate"] {
        assert!(text.contains(sub), "usage lists {sub}");
    }
}

#[test]
fn missing_input_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = omnia(&["eval", "--dets", "absent.json", "--gt", "absent.json", "--out", "r.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "io");
}

#[test]
fn unknown_flag_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = omnia(&["eval", "--frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "usage");
}

#[test]
fn schema_violation_is_reported_by_kind() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("gt.json"),
        r#"{"images":[{"id":1,"width":10,"height":10}],"categories":[{"id":1,"name":"car"}],
            "annotations":[{"id":1,"image_id":7,"category_id":1,"bbox":[0,0,2,2]}]}"#,
    )
    .unwrap();
    std::fs::write(dir.path().join("d.json"), "[]").unwrap();
    let out = omnia(&["eval", "--dets", "d.json", "--gt", "gt.json", "--out", "r.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "referential_integrity");

    std::fs::write(dir.path().join("bad.toml"), "threshold_low = 0.95\n").unwrap();
    let out = omnia(
        &["select", "--target", "gt.json", "--dets", "d.json", "--config", "bad.toml", "--out", "s.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_merge_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("exp.toml"), "images_per_domain = 10\n").unwrap();
    let run = |args: &[&str]| {
        let out = omnia(args, p);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["simulate", "--config", "exp.toml", "--out", "report.json", "--data-dir", "data"]);
    run(&[
        "merge",
        "--a",
        "data/a.json",
        "--b",
        "data/b.json",
        "--det-on-a",
        "data/det_on_a.json",
        "--det-on-b",
        "data/det_on_b.json",
        "--out",
        "merged.json",
        "--stats",
        "stats.json",
    ]);
    run(&["eval", "--dets", "data/det_on_b.json", "--gt", "data/hidden.json", "--iou", "0.5", "--out", "eval.json"]);

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 3);
    assert_eq!(report["arms"].as_array().unwrap().len(), 4);
    assert!(report["arms"][0]["eval"]["per_category"].is_array());
    let eval: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["seed"], 3);
    assert!(eval["mAP"].is_number());
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("stats.json")).unwrap()).unwrap();
    assert!(stats["a"]["safe"].is_number());
    omnia::annotations::parse_dataset(&std::fs::read_to_string(p.join("merged.json")).unwrap()).unwrap();
}

#[test]
fn seed_flag_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), "images_per_domain = 4\nvariants = [\"naive\"]\n").unwrap();
    let out = omnia(&["--seed", "11", "simulate", "--config", "exp.toml", "--out", "r.json"], dir.path());
    assert!(out.status.success());
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(r["seed"], 11);
}

#[test]
fn gradcheck_passes_and_fails_by_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let ok = omnia(&["gradcheck", "--trials", "20"], dir.path());
    assert!(ok.status.success());
    let report: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert!(report["max_relative_error"].as_f64().unwrap() < 1e-5);
    let strict = omnia(&["gradcheck", "--trials", "20", "--tolerance", "1e-300"], dir.path());
    assert_eq!(strict.status.code(), Some(1));
}

#[test]
fn out_dir_prefixes_relative_outputs() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), "images_per_domain = 2\nvariants = [\"naive\"]\n").unwrap();
    let out = omnia(&["--out-dir", "results", "simulate", "--config", "exp.toml", "--out", "r.json"], dir.path());
    assert!(out.status.success());
    assert!(dir.path().join("results/r.json").exists());
}
