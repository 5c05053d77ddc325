use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn negmine(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_negmine"))
        .current_dir(dir)
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn negmine")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = negmine(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn without_timestamps(mut v: Value) -> Value {
    let obj = v.as_object_mut().unwrap();
    obj.remove("started_at");
    obj.remove("finished_at");
    v
}

/// fixtures -> generate -> filter, returning nothing; files land under `dir`.
fn prepare(dir: &Path) {
    ok(dir, &["fixtures", "--out", "fx"]);
    ok(dir, &["generate", "--pairs", "fx/pairs.jsonl", "--out", "gen", "--seed", "7"]);
    ok(dir, &["filter", "--in", "gen/generated.jsonl", "--out", "filt/filtered.jsonl"]);
}

#[test]
fn invalid_threshold_exits_1_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["fixtures", "--out", "fx"]);
    ok(dir.path(), &["generate", "--pairs", "fx/pairs.jsonl", "--out", "gen"]);
    let out = negmine(
        dir.path(),
        &["filter", "--manifest", "gen/generated.jsonl", "--out", "filt", "--area-threshold", "200"],
    );
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("[filter].area_threshold"), "{stderr}");
    assert!(!dir.path().join("filt").exists(), "validation must precede side effects");
}

#[test]
fn bad_config_file_exits_1_before_touching_outputs() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[filter]\narea_threshold = 200\n").unwrap();
    let out = negmine(
        dir.path(),
        &["filter", "--config", "bad.toml", "--in", "m.jsonl", "--out", "filt/filtered.jsonl"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[filter].area_threshold"));
    assert!(!dir.path().join("filt").exists());
}

#[test]
fn config_file_values_are_validated_and_flags_override_them() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[train]\nmix_ratio = 1.5\n").unwrap();
    let out = negmine(dir.path(), &["--config", "bad.toml", "fixtures", "--out", "fx"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[train].mix_ratio"));

    std::fs::write(dir.path().join("cfg.toml"), "[generation]\nobjects_per_image = 1\nseed = 3\n").unwrap();
    ok(dir.path(), &["fixtures", "--out", "fx"]);
    ok(
        dir.path(),
        &["--config", "cfg.toml", "generate", "--pairs", "fx/pairs.jsonl", "--out", "gen", "--seed", "9"],
    );
    let rm = json(&dir.path().join("gen/run_manifest.json"));
    assert_eq!(rm["config"]["generation"]["objects_per_image"], 1);
    assert_eq!(rm["config"]["generation"]["seed"], 9);
    assert_eq!(rm["seeds"]["generation"], 9);
    assert!(rm["counters"]["objects_sampled"].as_u64().unwrap() <= 10);
}

#[test]
fn unknown_command_and_missing_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(negmine(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(negmine(dir.path(), &["filter", "--out", "x"]).status.code(), Some(2));
    assert_eq!(negmine(dir.path(), &["eval", "--report", "r"]).status.code(), Some(2));
}

#[test]
fn missing_input_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = negmine(dir.path(), &["generate", "--pairs", "nope.jsonl", "--out", "gen"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.jsonl"));
    assert!(!dir.path().join("gen").exists());
}

#[test]
fn repeated_generate_gives_identical_outputs_and_run_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["fixtures", "--out", "fx"]);
    let args = ["--jobs", "2", "generate", "--pairs", "fx/pairs.jsonl", "--out", "gen", "--seed", "7"];
    ok(d, &args);
    let first_manifest = without_timestamps(json(&d.join("gen/run_manifest.json")));
    let first_samples = std::fs::read(d.join("gen/generated.jsonl")).unwrap();
    ok(d, &args);
    assert_eq!(first_manifest, without_timestamps(json(&d.join("gen/run_manifest.json"))));
    assert_eq!(first_samples, std::fs::read(d.join("gen/generated.jsonl")).unwrap());

    let rm = json(&d.join("gen/run_manifest.json"));
    assert_eq!(rm["command"], "generate");
    assert_eq!(rm["seeds"]["generation"], 7);
    assert_eq!(rm["seeds"]["mock_backends"], 7);
    assert_eq!(rm["jobs"], 2);
    assert!(rm["template"]["instruction"].is_string());
    assert!(rm["tool_version"].is_string());
    assert_eq!(rm["inputs"]["pairs"], "fx/pairs.jsonl");
}

#[test]
fn eval_report_carries_metric_names() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    ok(d, &["eval", "--manifest", "filt/filtered.jsonl", "--report", "ev"]);
    let tsv = std::fs::read_to_string(d.join("ev/metrics.tsv")).unwrap();
    let header = tsv.lines().next().unwrap();
    for name in ["Text All", "Image All", "Group All", "Text 1", "Image 1", "Group 1"] {
        assert!(header.contains(name), "{header}");
    }
    let report = json(&d.join("ev/report.json"));
    assert!(report["metrics"]["Group All"].is_number());
    assert!(report["groups_evaluated"].as_u64().unwrap() > 0);
}

#[test]
fn eval_with_groups_file_and_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let groups = r#"{"id":"g","members":[{"id":"a","caption":"a dog","image":"a.png"},{"id":"b","caption":"a cat","image":"b.png"}]}"#;
    std::fs::write(d.join("groups.jsonl"), format!("{groups}\n")).unwrap();
    let emb = [
        r#"{"id":"a","modality":"text","embedding":[1.0,0.0]}"#,
        r#"{"id":"a","modality":"image","embedding":[0.9,0.1]}"#,
        r#"{"id":"b","modality":"text","embedding":[0.0,1.0]}"#,
        r#"{"id":"b","modality":"image","embedding":[0.1,0.9]}"#,
    ];
    std::fs::write(d.join("emb.jsonl"), emb.join("\n") + "\n").unwrap();
    ok(d, &["eval", "--groups", "groups.jsonl", "--embeddings", "emb.jsonl", "--report", "ev"]);
    let report = json(&d.join("ev/report.json"));
    assert_eq!(report["metrics"]["Group All"], 100.0);
    assert_eq!(report["groups_evaluated"], 1);
}

#[test]
fn end_to_end_pipeline_with_curation_and_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    ok(d, &["stats", "--in", "filt/filtered.jsonl", "--report", "stats", "--bins", "10"]);
    for f in ["itm_variation.tsv", "area_score.tsv", "joint.tsv", "mask_delta.tsv", "uniqueness.json"] {
        assert!(d.join("stats").join(f).is_file(), "{f}");
    }

    let filtered: Vec<Value> = std::fs::read_to_string(d.join("filt/filtered.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let passed: Vec<&Value> = filtered.iter().filter(|s| s["status"] == "passed").collect();
    assert!(passed.len() >= 2);
    let first_source = passed[0]["source_pair_id"].clone();
    let same: Vec<&&Value> = passed.iter().filter(|s| s["source_pair_id"] == first_source).collect();
    let mut log = String::new();
    for s in same.iter().take(2) {
        log.push_str(&format!(
            "{{\"sample_id\":{},\"verdict\":\"accept\",\"reviewer\":\"r\",\"timestamp\":\"2026-01-01T00:00:00Z\"}}\n",
            s["id"]
        ));
    }
    std::fs::write(d.join("filt/decisions.jsonl"), log).unwrap();
    ok(d, &["export", "--manifest", "filt/filtered.jsonl", "--out", "curated"]);
    let accepted = same.len().min(2);
    let curated = std::fs::read_to_string(d.join("curated/curated.jsonl")).unwrap();
    assert_eq!(curated.lines().count(), accepted);
    let dist = json(&d.join("curated/distribution.json"));
    assert_eq!(dist[accepted.to_string()], 1);
    for line in curated.lines() {
        let s: Value = serde_json::from_str(line).unwrap();
        assert_eq!(s["status"], "accepted");
        let image = d.join("curated").join(s["image"]["path"].as_str().unwrap());
        assert!(image.is_file(), "{} not resolvable from curated/", image.display());
    }

    ok(
        d,
        &[
            "train", "--generated", "filt/filtered.jsonl", "--real", "gen/pairs.jsonl", "--out", "tr",
            "--batch-size", "8", "--epochs", "2", "--lr", "0.01",
        ],
    );
    let curve = std::fs::read_to_string(d.join("tr/loss_curve.tsv")).unwrap();
    let report = json(&d.join("tr/train_report.json"));
    let steps = report["steps"].as_u64().unwrap() as usize;
    assert!(steps > 0);
    assert_eq!(curve.lines().count(), steps + 1);
    let records = std::fs::read_to_string(d.join("tr/loss_curve.jsonl")).unwrap();
    let first: Value = serde_json::from_str(records.lines().next().unwrap()).unwrap();
    for key in ["step", "epoch", "loss", "tau"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    assert_eq!(report["generated_per_batch"], 4);
    assert!(d.join("tr/checkpoints/epoch-002.json").is_file());

    ok(
        d,
        &["eval", "--manifest", "filt/filtered.jsonl", "--encoder", "tr/encoder.json", "--report", "ev"],
    );
    assert!(d.join("ev/metrics.tsv").is_file());
}
