//! End-to-end runs of the `ssr` subcommands, in process.

use std::fs;
use std::path::Path;

use ssr_core::cli::run;
use ssr_core::corpus::{manifest_to_string, ImageRef};
use ssr_core::glyph::{GlyphCipher, GlyphGrid};
use ssr_core::harness::world::glyph_sample;
use ssr_core::harness::RunReport;
use ssr_core::modelkit::checkpoint::save_model;
use ssr_core::modelkit::{ToyConfig, ToyModel, Tokenizer};

fn ssr(args: &[&str]) -> i32 {
    let mut all = vec!["ssr"];
    all.extend_from_slice(args);
    run(all)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_manifest(path: &Path, texts: &[&str]) {
    let samples: Vec<_> = texts.iter().enumerate().map(|(i, t)| glyph_sample(format!("s{i}"), t, "test")).collect();
    fs::write(path, manifest_to_string(&samples).unwrap()).unwrap();
}

/// A small experiment that finishes in seconds.
const TINY: &str = r#"{
  "train_size": 16,
  "world": {"pretrain_size": 32, "test_size": 8, "max_len": 4},
  "model": {"width": 16, "heads": 2, "layers": 1},
  "pretrain": {"epochs": 1, "batch_size": 16},
  "pretrain_gate": 0.0,
  "finetune": {"epochs": 1, "batch_size": 8}
}"#;

#[test]
fn selfreview_build_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = d.join("train.jsonl");
    write_manifest(&manifest, &["abc", "hello", "gap", "dim"]);
    let model = d.join("model.safetensors");
    let cfg = ToyConfig { width: 16, heads: 2, layers: 1, ..ToyConfig::default() };
    save_model(&ToyModel::new(cfg, Tokenizer::toy()).unwrap(), &model).unwrap();

    let records = d.join("selfreview.jsonl");
    assert_eq!(ssr(&["selfreview", "--manifest", p(&manifest), "--model", "reference", "--out", p(&records)]), 0);
    let text = fs::read_to_string(&records).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.contains("\"source_text\":\"hello\""));

    let examples = d.join("examples.jsonl");
    assert_eq!(
        ssr(&["build", "--manifest", p(&manifest), "--recipe", "ssr", "--selfreview", p(&records), "--out", p(&examples)]),
        0
    );
    assert_eq!(fs::read_to_string(&examples).unwrap().lines().count(), 4);
    // external OCR requested but not supplied: provenance error, no fallback
    assert_eq!(
        ssr(&["build", "--manifest", p(&manifest), "--provenance", "external_ocr", "--out", p(&d.join("x.jsonl"))]),
        2
    );

    let run_dir = d.join("adapter");
    let train_args = [
        "train", "--seed", "3", "--model", p(&model), "--examples", p(&examples), "--out-dir", p(&run_dir), "--epochs",
        "2", "--batch-size", "2", "--peak-lr", "0.001", "--rank", "2",
    ];
    assert_eq!(ssr(&train_args), 0);
    let adapter = run_dir.join("adapter-final.safetensors");
    assert!(adapter.exists());
    assert_eq!(fs::read_to_string(run_dir.join("loss_trace.jsonl")).unwrap().lines().count(), 4);

    let report = d.join("report.json");
    assert_eq!(
        ssr(&["eval", "--manifest", p(&manifest), "--model", p(&model), "--adapter", p(&adapter), "--out", p(&report)]),
        0
    );
    let body = fs::read_to_string(&report).unwrap();
    assert!(body.contains("\"dimt\"") && body.contains("\"ocr\""), "{body}");

    // the reference transcriber has no adapter to load
    assert_eq!(ssr(&["eval", "--manifest", p(&manifest), "--model", "reference", "--adapter", p(&adapter)]), 2);
}

#[test]
fn eval_scores_files() {
    let dir = tempfile::tempdir().unwrap();
    let (h, r, out) = (dir.path().join("h.txt"), dir.path().join("r.txt"), dir.path().join("o.json"));
    fs::write(&h, "甲乙丙\n丁\n").unwrap();
    fs::write(&r, "甲乙丙\n丁戊\n").unwrap();
    assert_eq!(ssr(&["eval", "--task", "dimt", "--hyp", p(&h), "--ref", p(&r), "--out", p(&out)]), 0);
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(rep["corpus"]["ca"], 0.75);
    assert_eq!(ssr(&["eval", "--task", "bogus", "--hyp", p(&h), "--ref", p(&r)]), 2);
}

#[test]
fn augment_merges_synthetic_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let base = d.join("base.jsonl");
    write_manifest(&base, &["abc", "def"]);
    let images = d.join("images.jsonl");
    let lines: Vec<String> = ["ghi", "jkl", "abc"]
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let img = ImageRef::glyphs(GlyphGrid::from_text(t, 0));
            serde_json::json!({"id": format!("u{i}"), "image": img}).to_string()
        })
        .collect();
    fs::write(&images, lines.join("\n")).unwrap();
    let out = d.join("merged.jsonl");
    assert_eq!(
        ssr(&["augment", "--base", p(&base), "--images", p(&images), "--model", "reference", "--dedup", "--out", p(&out)]),
        0
    );
    let merged = ssr_core::corpus::load_manifest(&out).unwrap();
    // "abc" duplicates a base target and is dropped
    assert_eq!(merged.len(), 4);
    let s = merged.get("synth:u0").unwrap();
    assert_eq!(s.target_text, GlyphCipher::standard().apply("ghi"));
    assert_eq!(s.provenance.as_ref().unwrap().translator, "stub-cipher");
}

#[test]
fn experiment_and_gate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let runs = d.join("runs");
    assert_eq!(ssr(&["experiment", "--config", p(&cfg), "--seed", "1", "--runs", p(&runs)]), 0);
    let run_dir = fs::read_dir(&runs).unwrap().map(|e| e.unwrap().path()).find(|p| p.join("report.json").exists()).unwrap();
    for f in ["config.json", "report.json", "loss_trace.jsonl", "checkpoints"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    let report: RunReport = serde_json::from_str(&fs::read_to_string(run_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.seed, 1);

    let strict = d.join("strict.json");
    fs::write(&strict, TINY.replace("\"pretrain_gate\": 0.0", "\"pretrain_gate\": 1.0")).unwrap();
    assert_eq!(ssr(&["experiment", "--config", p(&strict), "--seed", "1", "--runs", p(&runs)]), 3);

    assert_eq!(ssr(&["experiment", "--config", p(&cfg), "--seed", "1", "--recipe", "sft_dimt", "--provenance", "ground_truth"]), 2);
}

#[test]
fn sweep_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("sweep.json");
    fs::write(&cfg, format!(r#"{{"base": {TINY}, "grid": {{"recipes": ["ssr", "sft_dimt"]}}, "seeds": [0]}}"#)).unwrap();
    let root = d.join("runs");
    assert_eq!(ssr(&["sweep", "--config", p(&cfg), "--root", p(&root)]), 0);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["reports"].as_array().unwrap().len(), 2);
    assert_eq!(ssr(&["sweep", "--config", p(&cfg), "--root", p(&root)]), 0);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["resumed"].as_array().unwrap().len(), 2);
}
