use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kfs::factorization::{DecoderBank, KfsModel, LatentCodebook};
use kfs::formats;
use kfs::nets::{DecoderKind, DecoderSpec};
use serde_json::json;

fn kfs_cmd(args: &[&str], cache: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kfs"))
        .args(args)
        .env("KFS_CACHE_DIR", cache)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn digits() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/digits").canonicalize().unwrap()
}

fn write_config(dir: &Path, steps: usize) -> PathBuf {
    let d = digits();
    let p = |f: &str| d.join(f).to_string_lossy().into_owned();
    let cfg = json!({
        "schema_version": 1,
        "dataset": {
            "format": "idx",
            "train": { "images": [p("train-images.idx")], "labels": [p("train-labels.idx")] },
            "test": { "images": [p("test-images.idx")], "labels": [p("test-labels.idx")] },
            "classes": [0, 1],
            "max_train_per_class": 40,
            "max_test_per_class": 30
        },
        "images_per_class": 2,
        "codes_per_class": 4,
        "decoders": 2,
        "decoder": "LowR",
        "steps": steps,
        "base_seed": 7,
        "width": 8,
        "pretrain": { "steps": 10, "batch": 32, "lr": 0.01 },
        "checkpoint_every": 2,
        "eval": { "width": 8, "runs": 1 }
    });
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn container(dir: &Path) -> PathBuf {
    let spec = DecoderSpec::for_image(DecoderKind::LowR, [1, 16, 16]).unwrap();
    let cb = LatentCodebook::<f32>::gaussian(2, 4, spec.code_shape, 1.0, 0).unwrap();
    let model = KfsModel::new(cb, DecoderBank::build(&spec, 2, 0).unwrap()).unwrap();
    let path = dir.join("model.kfs1");
    fs::write(&path, formats::encode_condensed(&model)).unwrap();
    path
}

#[test]
fn export_writes_one_grid_per_class() {
    let dir = tempfile::tempdir().unwrap();
    let model = container(dir.path());
    let out = dir.path().join("img");
    let args = ["export-images", "--condensed", model.to_str().unwrap(), "--layout", "codes-by-decoders", "--out", out.to_str().unwrap()];
    ok(&kfs_cmd(&args, dir.path()));
    let mut files: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert_eq!(files.len(), 2);
    for f in files {
        let img = formats::decode_ppm(&fs::read(f).unwrap()).unwrap();
        assert_eq!((img.width, img.height), (4 * 16, 2 * 16));
    }
}

#[test]
fn eval_budget_sweep_has_one_row_per_budget() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 2);
    let model = container(dir.path());
    let csv = ok(&kfs_cmd(
        &["eval", "--condensed", model.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--budget-steps", "100,500,1000"],
        dir.path(),
    ));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "budget_steps,mean,std,accuracies");
    assert_eq!(lines.len(), 4);
    let budgets: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(budgets, ["100", "500", "1000"]);
}

fn max_rel(csv: &str) -> f64 {
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "term,closed_form,exhaustive,abs_err,rel_err");
    lines.map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).fold(0.0, f64::max)
}

#[test]
fn diagnose_bias_and_unbiased_on_toy() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("toy.json");
    fs::write(&toy, r#"{"schema_version": 1, "seed": 4}"#).unwrap();
    for what in ["bias", "unbiased", "variance"] {
        let csv = ok(&kfs_cmd(&["diagnose", what, "--config", toy.to_str().unwrap()], dir.path()));
        assert!(csv.lines().count() > 100);
        assert!(max_rel(&csv) < 1e-8, "{what}");
    }
}

#[test]
fn diagnose_budget_lists_published_rows() {
    let dir = tempfile::tempdir().unwrap();
    let csv = ok(&kfs_cmd(&["diagnose", "budget"], dir.path()));
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 10);
    assert_eq!(rows.iter().filter(|r| r.ends_with(",false")).count(), 3);
}

#[test]
fn gradcheck_reports_every_check_passing() {
    let dir = tempfile::tempdir().unwrap();
    let csv = ok(&kfs_cmd(&["gradcheck"], dir.path()));
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert!(rows.iter().any(|r| r.starts_with("matching_loss,")));
    for r in rows {
        let rel: f64 = r.split(',').nth(1).unwrap().parse().unwrap();
        assert!(rel < 1e-6, "{r}");
    }
}

#[test]
fn condense_resume_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let cfg = write_config(dir.path(), 4);
    let out = dir.path().join("run");
    let args = ["condense", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    ok(&kfs_cmd(&args, &cache));
    let first = fs::read(out.join("condensed.kfs1")).unwrap();
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,loss,wall_ms"));
    assert_eq!(log.lines().count(), 6);
    assert!(out.join("checkpoints/checkpoint.kfs1").exists());
    assert_eq!(fs::read_dir(&cache).unwrap().count(), 5);

    let mut resumed = args.to_vec();
    resumed.push("--resume");
    ok(&kfs_cmd(&resumed, &cache));
    assert_eq!(fs::read(out.join("condensed.kfs1")).unwrap(), first);
    let relog = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(relog.lines().count(), 6);

    let img = dir.path().join("img");
    ok(&kfs_cmd(
        &["export-images", "--condensed", out.join("condensed.kfs1").to_str().unwrap(), "--out", img.to_str().unwrap()],
        &cache,
    ));
    assert_eq!(fs::read_dir(img).unwrap().count(), 2);
}

#[test]
fn cache_means_fills_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 1);
    let text = fs::read_to_string(&cfg).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let src = dir.path().join("source.json");
    fs::write(&src, v["dataset"].to_string()).unwrap();
    let cache = dir.path().join("cache");
    ok(&kfs_cmd(&["cache-means", "--dataset", src.to_str().unwrap(), "--seeds", "3..6", "--width", "8"], &cache));
    let mut names: Vec<String> = fs::read_dir(&cache).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names.len(), 3);
    assert!(names[0].ends_with("-3.kfsm"));
}

#[test]
fn failures_print_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"schema_version": 9}"#).unwrap();
    for args in [
        vec!["export-images", "--condensed", "/nonexistent/x.kfs1"],
        vec!["condense", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()],
        vec!["diagnose", "bias", "--config", bad.to_str().unwrap()],
    ] {
        let out = kfs_cmd(&args, dir.path());
        assert!(!out.status.success());
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
        assert!(v["error"].is_string() && v["message"].is_string());
    }
}
