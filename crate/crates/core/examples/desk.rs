//! Condenses two digit classes and compares against a random coreset.
//!
//! `cargo run --release -p kfs-core --example desk -- <class_a> <class_b> <steps> <seed>`

use std::path::Path;
use std::time::Instant;

use kfs::data::{DatasetSource, SourceFormat, SplitPaths};
use kfs::diagnostics::diversity_probe;
use kfs::matching::EmbeddingMeanCache;
use kfs::nets::{DecoderKind, FeatureNet};
use kfs::pipeline::{self, CodeInit, CondenseConfig, EvalConfig, GradientMode, PretrainConfig};

fn main() -> kfs::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: u64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (a, b, steps, seed) = (arg(0, 1) as u32, arg(1, 8) as u32, arg(2, 2000) as usize, arg(3, 0));
    let mode = match args.get(4).map(String::as_str) {
        Some("pair") => GradientMode::SyntheticPair,
        _ => GradientMode::Full,
    };
    let ipc = arg(5, 4) as usize;
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/digits");
    let source = DatasetSource {
        format: SourceFormat::Idx,
        train: SplitPaths {
            images: vec!["train-images.idx".into()],
            labels: vec!["train-labels.idx".into()],
        },
        test: SplitPaths {
            images: vec!["test-images.idx".into()],
            labels: vec!["test-labels.idx".into()],
        },
        classes: Some(vec![a, b]),
        max_train_per_class: None,
        max_test_per_class: None,
        normalization: None,
    };
    let (train, test) = source.load(&dir)?;
    println!("train {} test {}", train.len(), test.len());
    let cfg = CondenseConfig {
        schema_version: 1,
        dataset: source,
        images_per_class: ipc,
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
        gradient: mode,
        checkpoint_every: 0,
        eval: None,
    };
    let cache = EmbeddingMeanCache::new(std::env::temp_dir().join("kfs-desk-cache"));
    let t = Instant::now();
    let out = pipeline::condense(&cfg, &train, Some(&cache))?;
    println!(
        "condense {:.1}s loss {} -> {}",
        t.elapsed().as_secs_f64(),
        out.log[0].loss,
        out.log.last().unwrap().loss
    );
    let probe_net = FeatureNet::build(&cfg.feature_config(train.image_shape()).with_seed(77))?;
    println!("diversity {}", diversity_probe(&out.model, &probe_net, train.normalization())?);
    let eval = EvalConfig {
        width: 32,
        runs: 3,
        seed,
        ..EvalConfig::default()
    };
    let t = Instant::now();
    let syn = out.model.synthesize_all()?;
    let kfs = pipeline::evaluate(&syn, &test, &eval)?;
    println!("kfs {:?} ({:.1}s)", kfs, t.elapsed().as_secs_f64());
    let rc = pipeline::random_coreset(&train, cfg.images_per_class, seed)?;
    println!("random {:?}", pipeline::evaluate(&rc, &test, &eval)?);
    Ok(())
}
