use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use image::{GrayImage, RgbImage};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgan-seg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthesizes `count` 64px pairs and trains one small epoch.
fn trained(dir: &Path, count: usize) -> (String, String) {
    let data = dir.join("data");
    ok(&["synth", "--count", &count.to_string(), "--size", "64", "--seed", "1", "--out", s(&data)]);
    let manifest = data.join("manifest.tsv");
    let run_dir = dir.join("run");
    ok(&[
        "train", "--data", s(&manifest), "--out", s(&run_dir), "--epochs", "1", "--f", "2", "--size", "64", "--levels",
        "6", "--split", "1.0",
    ]);
    (s(&manifest).to_string(), s(&run_dir.join("ckpt_epoch_001.bin")).to_string())
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["synth", "--count", "3"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--data", "x.tsv", "--out", "o", "--gen-loss", "wasserstein"]).status.code(), Some(2));
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--count", "5", "--size", "32", "--seed", "7", "--out", s(d)]);
    }
    for sub in ["manifest.tsv", "images/synth_00000.png", "masks/synth_00004.png"] {
        assert_eq!(fs::read(a.join(sub)).unwrap(), fs::read(b.join(sub)).unwrap(), "{sub}");
    }
}

#[test]
fn train_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ckpt) = trained(dir.path(), 4);
    let run_dir = dir.path().join("run");
    assert!(Path::new(&ckpt).exists());
    assert!(run_dir.join("epoch_001.png").exists());
    // --split 1.0 leaves no validation set
    assert!(!run_dir.join("val_metrics.jsonl").exists());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run_dir.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["train"]["learning_rate"], 0.002);
    assert_eq!(manifest["prep"]["split_train"], 4);
    assert_eq!(manifest["dataset_manifest_sha256"].as_str().unwrap().len(), 64);
    let losses = fs::read_to_string(run_dir.join("losses.jsonl")).unwrap();
    assert_eq!(losses.lines().count(), 1);
}

#[test]
fn train_size_auto_snaps_to_multiple() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--count", "2", "--size", "72", "--seed", "1", "--out", s(&data)]);
    let out = dir.path().join("run");
    ok(&[
        "train", "--data", s(&data.join("manifest.tsv")), "--out", s(&out), "--epochs", "1", "--f", "2", "--size", "auto",
        "--levels", "5", "--split", "1.0",
    ]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(m["prep"]["target_width"], 64);
    let bad = run(&["train", "--data", s(&data.join("manifest.tsv")), "--out", s(&out), "--size", "huge"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn eval_aggregations_agree_on_one_image() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ckpt) = trained(dir.path(), 1);
    let manifest = dir.path().join("data/manifest.tsv");
    let mut reports = Vec::new();
    for agg in ["per-image", "global"] {
        let json = dir.path().join(format!("{agg}.json"));
        let csv = dir.path().join(format!("{agg}.csv"));
        ok(&["eval", "--ckpt", &ckpt, "--data", s(&manifest), "--agg", agg, "--json", s(&json), "--csv", s(&csv)]);
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 2);
        reports.push(v);
    }
    for k in ["jaccard", "dsc", "recall", "precision", "accuracy", "f2", "n_images"] {
        assert_eq!(reports[0][k], reports[1][k], "{k}");
        if k != "n_images" {
            let x = reports[0][k].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&x));
        }
    }
    assert_eq!(reports[1]["aggregation"], "global_counts");
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, ckpt) = trained(dir.path(), 1);
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let bad = dir.path().join("bad.bin");
    fs::write(&bad, bytes).unwrap();
    let out = run(&["eval", "--ckpt", s(&bad), "--data", &manifest]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn predict_restores_original_size_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ckpt) = trained(dir.path(), 2);
    let inputs = dir.path().join("inputs");
    fs::create_dir_all(&inputs).unwrap();
    RgbImage::from_fn(80, 50, |x, y| image::Rgb([(x * 3) as u8, (y * 5) as u8, 90])).save(inputs.join("odd.png")).unwrap();
    fs::copy(dir.path().join("data/images/synth_00000.png"), inputs.join("first.png")).unwrap();
    fs::write(inputs.join("notes.txt"), "not an image").unwrap();

    let mut outputs = Vec::new();
    for name in ["p1", "p2"] {
        let out = dir.path().join(name);
        ok(&["predict", "--ckpt", &ckpt, "--images", s(&inputs), "--out", s(&out), "--raw"]);
        outputs.push(out);
    }
    let mask = image::open(outputs[0].join("odd.png")).unwrap().to_luma8();
    assert_eq!(mask.dimensions(), (80, 50));
    assert!(mask.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
    let prob: GrayImage = image::open(outputs[0].join("odd_prob.png")).unwrap().to_luma8();
    assert_eq!(prob.dimensions(), (80, 50));
    assert_eq!(fs::read_dir(&outputs[0]).unwrap().count(), 4);
    for f in ["odd.png", "first.png", "first_prob.png"] {
        assert_eq!(fs::read(outputs[0].join(f)).unwrap(), fs::read(outputs[1].join(f)).unwrap(), "{f}");
    }

    // a manifest works as input too
    let via_manifest = dir.path().join("p3");
    ok(&["predict", "--ckpt", &ckpt, "--images", s(&dir.path().join("data/manifest.tsv")), "--out", s(&via_manifest)]);
    assert_eq!(fs::read_dir(&via_manifest).unwrap().count(), 2);
}

#[test]
fn bench_reports_fps_and_config() {
    let out = ok(&["bench", "--f", "2", "--size", "64", "--levels", "6", "--count", "2", "--repeats", "3"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let fps: f64 = text.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(fps > 0.0, "{text}");
    assert!(text.contains("frames 6"), "{text}");
    assert!(text.contains("f 2") && text.contains("size 64x64"), "{text}");
}
