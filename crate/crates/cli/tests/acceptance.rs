//! One PASS/FAIL line per acceptance criterion. Exits nonzero if any fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use kfs::data::{Dataset, DatasetSource, Normalization, SourceFormat, SplitPaths};
use kfs::diagnostics::{self, Toy, ToyConfig};
use kfs::factorization::{published_settings, DecoderBank, KfsModel, LatentCodebook, Triple};
use kfs::matching::{self, EmbeddingMeanCache, Objective};
use kfs::nets::{param_count, DecoderKind, DecoderSpec, FeatureNet, FeatureNetConfig};
use kfs::pipeline::{self, CodeInit, CondenseConfig, EvalConfig, GradientMode, PretrainConfig};
use kfs::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

const EXACT_TOL: f64 = 1e-8;
const GRADCHECK_TOL: f64 = 1e-6;
const CHUNK_TOL: f64 = 1e-6;
const PCT_TOL: f64 = 0.01;
const DESK_CLASSES: [u32; 2] = [1, 8];
const DESK_STEPS: usize = 2000;
const DESK_ACCURACY: f64 = 90.0;
const DESK_MARGIN: f64 = 3.0;
const BASELINE_IPC: usize = 4;
const PROBE_SEED: u64 = 77;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn digits_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/digits")
}

fn desk_source() -> DatasetSource {
    let dir = digits_dir().canonicalize().expect("digits data");
    let p = |f: &str| dir.join(f);
    DatasetSource {
        format: SourceFormat::Idx,
        train: SplitPaths {
            images: vec![p("train-images.idx")],
            labels: vec![p("train-labels.idx")],
        },
        test: SplitPaths {
            images: vec![p("test-images.idx")],
            labels: vec![p("test-labels.idx")],
        },
        classes: Some(DESK_CLASSES.to_vec()),
        max_train_per_class: None,
        max_test_per_class: None,
        normalization: None,
    }
}

fn desk_config(seed: u64, steps: usize, gradient: GradientMode) -> CondenseConfig {
    CondenseConfig {
        schema_version: 1,
        dataset: desk_source(),
        images_per_class: BASELINE_IPC,
        codes_per_class: 4,
        decoders: 2,
        decoder: DecoderKind::LowR,
        code_shape: None,
        steps,
        lr_decoders: 0.01,
        lr_codes: 0.1,
        base_seed: 1000,
        init_seed: seed,
        chunk_size: 0,
        width: 32,
        depth: 3,
        pretrain: PretrainConfig {
            steps: 500,
            batch: 256,
            lr: 0.01,
        },
        code_init: CodeInit::Encoder,
        decoder_jitter: 0.01,
        gradient,
        checkpoint_every: 1000,
        eval: Some(desk_eval(seed)),
    }
}

fn desk_eval(seed: u64) -> EvalConfig {
    EvalConfig {
        width: 32,
        runs: 3,
        seed,
        ..EvalConfig::default()
    }
}

fn bias_identity() -> kfs::Result<Outcome> {
    let t = Instant::now();
    let toy = Toy::build(&ToyConfig::default())?;
    let worst = diagnostics::worst(&diagnostics::bias_rows(&toy)?);
    let secs = t.elapsed().as_secs_f64();
    Ok(outcome(
        worst < EXACT_TOL && secs < 10.0,
        format!("worst per-coordinate rel_err {worst:.2e} (< {EXACT_TOL:e}), {secs:.1} s (< 10 s)"),
    ))
}

fn variance_identity() -> kfs::Result<Outcome> {
    let t = Instant::now();
    let toy = Toy::build(&ToyConfig::default())?;
    let rows = diagnostics::variance_rows(&toy, true)?;
    let trace = rows[0].rel_err;
    let worst = diagnostics::worst(&rows);
    let secs = t.elapsed().as_secs_f64();
    Ok(outcome(
        worst < EXACT_TOL && secs < 30.0,
        format!(
            "trace rel_err {trace:.2e}, worst over {} diagonal and matrix entries {worst:.2e} (< {EXACT_TOL:e}), {secs:.1} s (< 30 s)",
            rows.len() - 1
        ),
    ))
}

fn unbiasedness() -> kfs::Result<Outcome> {
    let toy = Toy::build(&ToyConfig::default())?;
    let worst = diagnostics::worst(&diagnostics::unbiased_rows(&toy)?);
    Ok(outcome(
        worst < EXACT_TOL,
        format!("worst per-coordinate rel_err {worst:.2e} (< {EXACT_TOL:e}) over 16 joint draws"),
    ))
}

fn gradient_checks() -> kfs::Result<Outcome> {
    let checks = diagnostics::gradcheck_suite(0)?;
    let failing: Vec<&str> = checks.iter().filter(|c| !c.report.passes(GRADCHECK_TOL)).map(|c| c.name).collect();
    let worst = checks.iter().map(|c| c.report.rel_err).fold(0.0, f64::max);
    Ok(outcome(
        failing.is_empty(),
        format!("{} checks incl. matching_loss, worst rel_err {worst:.2e} (< {GRADCHECK_TOL:e}), failing {failing:?}", checks.len()),
    ))
}

fn parameter_accounting() -> kfs::Result<Outcome> {
    let low_r = param_count(&DecoderSpec::new(DecoderKind::LowR, [12, 4, 4], 3)?);
    let mut consistent = Vec::new();
    let mut flagged = Vec::new();
    let mut pass = low_r == 738;
    for s in published_settings() {
        let computed = s.report()?.overparam_pct;
        let line = format!("{} I/C={} {computed:.2} vs {:.2}", s.dataset, s.images_per_class, s.stated_overparam_pct);
        if s.consistent()? {
            consistent.push(line);
        } else {
            flagged.push(line);
        }
    }
    for want in [0.47, 2.88, 1.92, 0.29] {
        let hit = published_settings()
            .iter()
            .any(|s| (s.stated_overparam_pct - want).abs() < 1e-9 && s.consistent().unwrap_or(false));
        pass &= hit;
    }
    pass &= flagged.len() == 3;
    let out = Command::new(env!("CARGO_BIN_EXE_kfs")).args(["diagnose", "budget"]).output();
    let reported = match out {
        Ok(o) if o.status.success() => String::from_utf8_lossy(&o.stdout).lines().filter(|l| l.ends_with(",false")).count(),
        _ => 0,
    };
    pass &= reported == 3;
    Ok(outcome(
        pass,
        format!(
            "LowR params {low_r} (= 738); within {PCT_TOL} pp: [{}]; inconsistent, reported by `diagnose budget` ({reported} rows): [{}]",
            consistent.join(", "),
            flagged.join(", ")
        ),
    ))
}

fn chunked_exactness() -> kfs::Result<Outcome> {
    let spec = DecoderSpec::for_image(DecoderKind::LowR, [3, 16, 16])?;
    let cb = LatentCodebook::<f32>::gaussian(3, 4, spec.code_shape, 1.0, 1)?;
    let model = KfsModel::new(cb, DecoderBank::build(&spec, 2, 2)?)?;
    let net = FeatureNet::build(&FeatureNetConfig::new([3, 16, 16], 16, 3, 3))?;
    let mut r = kfs::rng::stream("acceptance.targets", 0);
    let targets = Tensor::from_fn(&[3, net.embed_dim()], |_| r.random::<f32>());
    let norm = Normalization::identity(3);
    let obj = Objective {
        net: &net,
        norm: &norm,
        targets: &targets,
    };
    let (_, full) = matching::full_gradient(&model, &obj)?;
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut r = kfs::rng::stream("acceptance.partition", seed);
        let mut t: Vec<Triple> = model.triples();
        t.shuffle(&mut r);
        let mut chunks = Vec::new();
        while !t.is_empty() {
            let k = r.random_range(1..=t.len());
            chunks.push(t.drain(..k).collect::<Vec<_>>());
        }
        let (_, g) = matching::exact_gradient(&model, &obj, &chunks)?;
        worst = worst.max((g.sub(&full).norm() / full.norm()) as f64);
    }
    Ok(outcome(
        worst < CHUNK_TOL,
        format!("20 random partitions of 24 triples, worst rel err {worst:.2e} (< {CHUNK_TOL:e}, f32)"),
    ))
}

struct DeskRun {
    model: KfsModel<f32>,
}

fn condense_desk(train: &Dataset, cache: &EmbeddingMeanCache, seed: u64, mode: GradientMode) -> kfs::Result<DeskRun> {
    let out = pipeline::condense(&desk_config(seed, DESK_STEPS, mode), train, Some(cache))?;
    Ok(DeskRun { model: out.model })
}

fn desk_end_to_end(train: &Dataset, test: &Dataset, cache: &EmbeddingMeanCache, full: &mut Vec<DeskRun>) -> kfs::Result<Outcome> {
    let t = Instant::now();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..5 {
        let run = condense_desk(train, cache, seed, GradientMode::Full)?;
        let kfs_acc = pipeline::evaluate(&run.model.synthesize_all()?, test, &desk_eval(seed))?.mean;
        let coreset = pipeline::random_coreset(train, BASELINE_IPC, seed)?;
        let random_acc = pipeline::evaluate(&coreset, test, &desk_eval(seed))?.mean;
        let ok = kfs_acc >= DESK_ACCURACY && kfs_acc - random_acc >= DESK_MARGIN;
        wins += ok as usize;
        lines.push(format!("seed {seed}: {kfs_acc:.1} vs {random_acc:.1}"));
        full.push(run);
    }
    let mins = t.elapsed().as_secs_f64() / 60.0;
    Ok(outcome(
        wins >= 4 && mins < 15.0,
        format!(
            "digits {}v{}: {wins}/5 seeds with KFS >= {DESK_ACCURACY}% and >= {DESK_MARGIN} pts over random I/C={BASELINE_IPC} [{}], {mins:.1} min (< 15)",
            DESK_CLASSES[0],
            DESK_CLASSES[1],
            lines.join("; ")
        ),
    ))
}

fn diversification(train: &Dataset, cache: &EmbeddingMeanCache, full: &mut Vec<DeskRun>) -> kfs::Result<Outcome> {
    let probe_cfg = desk_config(0, DESK_STEPS, GradientMode::Full).feature_config(train.image_shape());
    let probe = FeatureNet::build(&probe_cfg.with_seed(PROBE_SEED))?;
    let norm = train.normalization();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..10u64 {
        if full.len() <= seed as usize {
            full.push(condense_desk(train, cache, seed, GradientMode::Full)?);
        }
        let pair = condense_desk(train, cache, seed, GradientMode::SyntheticPair)?;
        let a = diagnostics::diversity_probe(&full[seed as usize].model, &probe, norm)?;
        let b = diagnostics::diversity_probe(&pair.model, &probe, norm)?;
        wins += (a < b) as usize;
        lines.push(format!("{a:.3}/{b:.3}"));
    }
    Ok(outcome(
        wins >= 8,
        format!("full-batch below single-pair cosine similarity in {wins}/10 paired seeds (>= 8) [{}]", lines.join(" ")),
    ))
}

fn write_cli_config(dir: &Path, steps: usize) -> PathBuf {
    let mut cfg = desk_config(0, steps, GradientMode::Full);
    cfg.pretrain.steps = 50;
    cfg.checkpoint_every = 10;
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).expect("config json")).expect("write config");
    path
}

fn cli_condense(config: &Path, out: &Path, cache: &Path) -> kfs::Result<()> {
    let o = Command::new(env!("CARGO_BIN_EXE_kfs"))
        .args(["condense", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("KFS_CACHE_DIR", cache)
        .output()
        .map_err(|e| kfs::Error::Invalid(e.to_string()))?;
    if !o.status.success() {
        return Err(kfs::Error::Invalid(String::from_utf8_lossy(&o.stderr).trim().to_owned()));
    }
    Ok(())
}

fn determinism(dir: &Path) -> kfs::Result<Outcome> {
    let config = write_cli_config(dir, 60);
    let cache = dir.join("cache");
    cli_condense(&config, &dir.join("a"), &cache)?;
    cli_condense(&config, &dir.join("b"), &cache)?;
    let a = fs::read(dir.join("a/condensed.kfs1")).map_err(|e| kfs::Error::Invalid(e.to_string()))?;
    let b = fs::read(dir.join("b/condensed.kfs1")).map_err(|e| kfs::Error::Invalid(e.to_string()))?;
    Ok(outcome(a == b, format!("two `kfs condense` runs, {} byte KFS1 containers identical: {}", a.len(), a == b)))
}

/// `step,loss` columns; wall-clock time differs between any two runs.
fn log_columns(path: &Path) -> kfs::Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| kfs::Error::Invalid(e.to_string()))?;
    Ok(text.lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_owned()).collect())
}

fn cache_fidelity(dir: &Path) -> kfs::Result<Outcome> {
    let config = write_cli_config(dir, 60);
    let cache = dir.join("cache");
    cli_condense(&config, &dir.join("cold"), &cache)?;
    let entries = fs::read_dir(&cache).map(|d| d.count()).unwrap_or(0);
    cli_condense(&config, &dir.join("warm"), &cache)?;
    fs::remove_dir_all(&cache).map_err(|e| kfs::Error::Invalid(e.to_string()))?;
    cli_condense(&config, &dir.join("again"), &cache)?;
    let cold = log_columns(&dir.join("cold/train_log.csv"))?;
    let warm = log_columns(&dir.join("warm/train_log.csv"))?;
    let again = log_columns(&dir.join("again/train_log.csv"))?;
    let same = cold == warm && warm == again && cold.len() == 62;
    Ok(outcome(
        same,
        format!("{} log rows identical in step and loss across cold, warm ({entries} entries) and deleted-cache runs: {same}", cold.len() - 1),
    ))
}

fn report(id: usize, name: &str, result: kfs::Result<Outcome>, passed: &mut usize) {
    let o = result.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
    *passed += o.pass as usize;
    println!("[{}] {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn main() {
    let mut passed = 0;
    report(1, "bias identity", bias_identity(), &mut passed);
    report(2, "variance identity", variance_identity(), &mut passed);
    report(3, "real-index unbiasedness", unbiasedness(), &mut passed);
    report(4, "gradient correctness", gradient_checks(), &mut passed);
    report(5, "parameter accounting", parameter_accounting(), &mut passed);
    report(6, "chunked-gradient exactness", chunked_exactness(), &mut passed);

    let scratch = tempfile::tempdir().expect("tempdir");
    let cache = EmbeddingMeanCache::new(scratch.path().join("desk-cache"));
    let mut full_runs = Vec::new();
    match desk_source().load(Path::new("")) {
        Ok((train, test)) => {
            report(7, "desk-scale end-to-end", desk_end_to_end(&train, &test, &cache, &mut full_runs), &mut passed);
            report(8, "diversification", diversification(&train, &cache, &mut full_runs), &mut passed);
        }
        Err(e) => {
            report(7, "desk-scale end-to-end", Err(e), &mut passed);
            report(8, "diversification", Err(kfs::Error::Invalid("dataset unavailable".into())), &mut passed);
        }
    }
    let d9 = scratch.path().join("determinism");
    let d10 = scratch.path().join("cache-fidelity");
    fs::create_dir_all(&d9).expect("scratch");
    fs::create_dir_all(&d10).expect("scratch");
    report(9, "determinism", determinism(&d9), &mut passed);
    report(10, "cache fidelity", cache_fidelity(&d10), &mut passed);

    println!("acceptance: {passed}/10 criteria passed");
    if passed != 10 {
        std::process::exit(1);
    }
}
