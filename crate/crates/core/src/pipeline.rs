//! Decoder pretraining, the condensation loop and classifier evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetSource, Normalization};
use crate::diagnostics::{Draw, SubsampleMode, SubsampleScheme};
use crate::factorization::{DecoderBank, KfsModel, LatentCodebook, SyntheticDataset, Triple};
use crate::formats::{self, Rgb8};
use crate::matching::{self, ClassShard, EmbeddingMeanCache, Objective};
use crate::nets::{Classifier, ClassifierConfig, Decoder, DecoderKind, DecoderSpec, Encoder, FeatureNet, FeatureNetConfig, Params};
use crate::optim::{Adam, Sgd, StepSchedule};
use crate::rng;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

fn default_steps() -> usize {
    20_000
}
fn default_lr_decoders() -> f64 {
    0.01
}
fn default_lr_codes() -> f64 {
    0.1
}
fn default_width() -> usize {
    64
}
fn default_depth() -> usize {
    3
}
fn default_checkpoint_every() -> usize {
    1000
}
fn default_jitter() -> f64 {
    0.01
}

/// Autoencoder pretraining of the first decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 256,
            lr: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum CodeInit {
    /// Encode randomly drawn real images of each class.
    Encoder,
    Gaussian { sigma: f64 },
}

/// Which gradient drives condensation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// All classes and all `(m, d)` pairs.
    Full,
    /// One uniformly drawn `(m, d)` per step, shared by all classes.
    SyntheticPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondenseConfig {
    pub schema_version: u32,
    pub dataset: DatasetSource,
    pub images_per_class: usize,
    pub codes_per_class: usize,
    pub decoders: usize,
    pub decoder: DecoderKind,
    /// Derived from the image size and decoder kind when absent.
    #[serde(default)]
    pub code_shape: Option<[usize; 3]>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr_decoders")]
    pub lr_decoders: f64,
    #[serde(default = "default_lr_codes")]
    pub lr_codes: f64,
    /// Feature net of step `t` is built from `base_seed + t`.
    pub base_seed: u64,
    /// Seed for pretraining, code and decoder initialization.
    #[serde(default)]
    pub init_seed: u64,
    /// Triples per backward pass; 0 means all at once.
    #[serde(default)]
    pub chunk_size: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default = "default_code_init")]
    pub code_init: CodeInit,
    /// Std of the noise added to each decoder copy after pretraining.
    #[serde(default = "default_jitter")]
    pub decoder_jitter: f64,
    #[serde(default = "default_mode")]
    pub gradient: GradientMode,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub eval: Option<EvalConfig>,
}

fn default_code_init() -> CodeInit {
    CodeInit::Encoder
}

fn default_mode() -> GradientMode {
    GradientMode::Full
}

impl CondenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != formats::SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported schema_version {}", self.schema_version)));
        }
        if !(self.lr_decoders > 0.0 && self.lr_codes > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.codes_per_class == 0 || self.decoders == 0 {
            return Err(Error::Config("need at least one code per class and one decoder".into()));
        }
        if self.images_per_class == 0 {
            return Err(Error::Config("images_per_class must be positive".into()));
        }
        if !(self.decoder_jitter >= 0.0) {
            return Err(Error::Config("decoder_jitter must be non-negative".into()));
        }
        if let CodeInit::Gaussian { sigma } = self.code_init {
            if !(sigma > 0.0) {
                return Err(Error::Config("code sigma must be positive".into()));
            }
        }
        if let Some(e) = &self.eval {
            e.validate()?;
        }
        Ok(())
    }

    pub fn decoder_spec(&self, image_shape: [usize; 3]) -> Result<DecoderSpec> {
        let spec = match self.code_shape {
            Some(code) => DecoderSpec::new(self.decoder, code, image_shape[0])?,
            None => DecoderSpec::for_image(self.decoder, image_shape)?,
        };
        if spec.output_shape() != image_shape {
            return Err(Error::Config(format!(
                "decoder produces {:?} images, dataset has {image_shape:?}",
                spec.output_shape()
            )));
        }
        Ok(spec)
    }

    pub fn feature_config(&self, image_shape: [usize; 3]) -> FeatureNetConfig {
        FeatureNetConfig::new(image_shape, self.width, self.depth, self.base_seed)
    }
}

/// Result of autoencoder pretraining.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub decoder: Decoder<f32>,
    pub encoder: Encoder<f32>,
    pub losses: Vec<f32>,
}

/// Mean squared reconstruction error of `images` through encoder and decoder.
pub fn reconstruction_mse(enc: &Encoder<f32>, dec: &Decoder<f32>, images: &Tensor<f32>) -> Result<f32> {
    let rec = dec.decode(&enc.encode(images)?)?;
    let n = images.numel() as f64;
    let se: f64 = rec.data().iter().zip(images.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
    Ok((se / n) as f32)
}

/// Jointly trains a mirrored encoder and one decoder on reconstruction MSE.
pub fn pretrain_decoder(train: &Dataset, spec: &DecoderSpec, cfg: &PretrainConfig, seed: u64) -> Result<Pretrained> {
    let mut decoder = Decoder::<f32>::build(spec, seed)?;
    let mut encoder = Encoder::<f32>::build(spec, seed)?;
    let n = train.len();
    if n == 0 {
        return Err(Error::Invalid("pretraining needs a non-empty dataset".into()));
    }
    let batch = cfg.batch.clamp(1, n);
    let shapes: Vec<Vec<usize>> = encoder
        .params()
        .iter()
        .chain(decoder.params().iter())
        .map(|p| p.shape().to_vec())
        .collect();
    let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut opt = Adam::new(&refs, vec![cfg.lr; refs.len()])?;
    let mut r = rng::stream("pretrain.batches", seed);
    let mut order = rng::permutation(&mut r, n);
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cursor + batch > n {
            order = rng::permutation(&mut r, n);
            cursor = 0;
        }
        let x = train.gather(&order[cursor..cursor + batch]);
        cursor += batch;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let ev = encoder.register(&mut tape, true);
        let dv = decoder.register(&mut tape, true);
        let code = encoder.encode_on(&mut tape, xv, &ev)?;
        let rec = decoder.decode_on(&mut tape, code, &dv)?;
        let diff = tape.sub(rec, xv)?;
        let sq = tape.dot(diff, diff)?;
        let numel = tape.value(xv).numel();
        let loss = tape.scale(sq, 1.0 / numel as f32);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                value: value as f64,
            });
        }
        losses.push(value);
        let mut grads = tape.backward(loss)?;
        let g: Vec<Tensor<f32>> = ev.iter().chain(&dv).map(|&v| grads.take(v).expect("leaf")).collect();
        let mut params: Vec<&mut Tensor<f32>> = encoder.params_mut();
        params.extend(decoder.params_mut());
        opt.update(&mut params, &g)?;
    }
    Ok(Pretrained {
        decoder,
        encoder,
        losses,
    })
}

/// Codes for every class from `init`, then `D` jittered copies of `decoder`.
pub fn initial_model(train: &Dataset, cfg: &CondenseConfig, pre: &Pretrained) -> Result<KfsModel<f32>> {
    let spec = *pre.decoder.spec();
    let c = train.num_classes();
    let m = cfg.codes_per_class;
    let codebook = match cfg.code_init {
        CodeInit::Gaussian { sigma } => LatentCodebook::gaussian(c, m, spec.code_shape, sigma, cfg.init_seed)?,
        CodeInit::Encoder => {
            let mut r = rng::stream("code_init", cfg.init_seed);
            let mut data = Vec::with_capacity(c * m * spec.code_numel());
            for class in 0..c {
                let idx = train.class_indices(class);
                if idx.is_empty() {
                    return Err(Error::Invalid(format!("class {class} has no training examples")));
                }
                let perm = rng::permutation(&mut r, idx.len());
                let pick: Vec<usize> = (0..m).map(|k| idx[perm[k % idx.len()]]).collect();
                let codes = pre.encoder.encode(&train.gather(&pick))?;
                data.extend_from_slice(codes.data());
            }
            let [ch, h, w] = spec.code_shape;
            LatentCodebook::new(Tensor::new(vec![c, m, ch, h, w], data)?, (0..c as u32).collect())?
        }
    };
    let mut bank = DecoderBank::replicate(&pre.decoder, cfg.decoders)?;
    if cfg.decoder_jitter > 0.0 {
        let mut r = rng::stream("decoder_jitter", cfg.init_seed);
        for d in bank.decoders_mut() {
            for p in d.params_mut() {
                for v in p.data_mut() {
                    *v += rng::normal::<f32>(&mut r, cfg.decoder_jitter);
                }
            }
        }
    }
    KfsModel::new(codebook, bank)
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f32,
    pub wall_ms: u64,
}

impl LogRow {
    pub const HEADER: &'static str = "step,loss,wall_ms";

    pub fn csv(&self) -> String {
        format!("{},{},{}", self.step, self.loss, self.wall_ms)
    }
}

/// Condensation state between steps.
pub struct Condenser<'a> {
    cfg: CondenseConfig,
    train: &'a Dataset,
    cache: Option<&'a EmbeddingMeanCache>,
    feature: FeatureNetConfig,
    model: KfsModel<f32>,
    opt: Adam<f32>,
    started: Instant,
}

impl<'a> Condenser<'a> {
    /// Pretrains, initializes codes and decoders, and starts at step 0.
    pub fn new(cfg: &CondenseConfig, train: &'a Dataset, cache: Option<&'a EmbeddingMeanCache>) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.decoder_spec(train.image_shape())?;
        let pre = pretrain_decoder(train, &spec, &cfg.pretrain, cfg.init_seed)?;
        let model = initial_model(train, cfg, &pre)?;
        Self::resume(cfg, train, cache, model, None)
    }

    /// Continues from a saved model and optimizer state.
    pub fn resume(
        cfg: &CondenseConfig,
        train: &'a Dataset,
        cache: Option<&'a EmbeddingMeanCache>,
        model: KfsModel<f32>,
        opt: Option<Adam<f32>>,
    ) -> Result<Self> {
        cfg.validate()?;
        if model.num_classes() != train.num_classes() || model.image_shape() != train.image_shape() {
            return Err(Error::Invalid("model does not fit the training set".into()));
        }
        let opt = match opt {
            Some(o) => o,
            None => {
                let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
                let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
                let mut lrs = vec![cfg.lr_decoders; refs.len()];
                lrs[0] = cfg.lr_codes;
                Adam::new(&refs, lrs)?
            }
        };
        if opt.m.len() != model.params().len() {
            return Err(Error::Invalid("optimizer state does not fit the model".into()));
        }
        Ok(Self {
            cfg: cfg.clone(),
            train,
            cache,
            feature: cfg.feature_config(train.image_shape()),
            model,
            opt,
            started: Instant::now(),
        })
    }

    pub fn step(&self) -> usize {
        self.opt.step as usize
    }

    pub fn model(&self) -> &KfsModel<f32> {
        &self.model
    }

    pub fn optimizer(&self) -> &Adam<f32> {
        &self.opt
    }

    pub fn into_model(self) -> KfsModel<f32> {
        self.model
    }

    fn net_and_targets(&self, t: usize) -> Result<(FeatureNet<f32>, Tensor<f32>)> {
        let seed = self.cfg.base_seed.wrapping_add(t as u64);
        let entry = matching::compute_or_load_means(self.train, &self.feature, seed, self.cache)?;
        let net = FeatureNet::build(&self.feature.with_seed(seed))?;
        Ok((net, entry.means))
    }

    fn row(&self, step: usize, loss: f32) -> Result<LogRow> {
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                value: loss as f64,
            });
        }
        Ok(LogRow {
            step,
            loss,
            wall_ms: self.started.elapsed().as_millis() as u64,
        })
    }

    /// One optimizer update; logs the loss before it.
    pub fn advance(&mut self) -> Result<LogRow> {
        let t = self.step();
        let (net, targets) = self.net_and_targets(t)?;
        let norm = self.train.normalization();
        let obj = Objective {
            net: &net,
            norm,
            targets: &targets,
        };
        let (loss, grad) = match self.cfg.gradient {
            GradientMode::Full => {
                let size = match self.cfg.chunk_size {
                    0 => usize::MAX,
                    s => s,
                };
                let shards = ClassShard::split(self.model.num_classes(), 1);
                let chunks = matching::shard_chunks(&self.model, &shards, size);
                matching::exact_gradient(&self.model, &obj, &chunks)?
            }
            GradientMode::SyntheticPair => {
                let scheme = SubsampleScheme {
                    mode: SubsampleMode::SyntheticPair,
                    seed: self.cfg.base_seed,
                };
                let Draw::Pair { m, d } =
                    scheme.draw(t as u64, self.model.codes_per_class(), self.model.num_decoders(), &[])?
                else {
                    unreachable!("pair scheme draws pairs")
                };
                let selection: Vec<Vec<Triple>> =
                    (0..self.model.num_classes()).map(|c| vec![Triple::new(c, m, d)]).collect();
                matching::selection_gradient(&self.model, &obj, &targets, &selection)?
            }
        };
        let row = self.row(t, loss)?;
        let mut params = self.model.params_mut();
        self.opt.update(&mut params, &grad.tensors)?;
        Ok(row)
    }

    /// Full-objective loss at the current step without updating.
    pub fn current_loss(&self) -> Result<LogRow> {
        let t = self.step();
        let (net, targets) = self.net_and_targets(t)?;
        let obj = Objective {
            net: &net,
            norm: self.train.normalization(),
            targets: &targets,
        };
        let loss = matching::mmd_loss(&self.model, &obj)?;
        self.row(t, loss)
    }

    /// Runs until `cfg.steps`, then logs the final loss. Checkpoints are
    /// written every `checkpoint_every` steps when `checkpoint_dir` is set.
    pub fn run(&mut self, checkpoint_dir: Option<&Path>, mut on_row: impl FnMut(&LogRow) -> Result<()>) -> Result<()> {
        while self.step() < self.cfg.steps {
            let row = self.advance()?;
            on_row(&row)?;
            if let Some(dir) = checkpoint_dir {
                if self.cfg.checkpoint_every > 0 && self.step() % self.cfg.checkpoint_every == 0 {
                    save_checkpoint(dir, &self.model, &self.opt)?;
                }
            }
        }
        on_row(&self.current_loss()?)
    }
}

pub const CHECKPOINT_MODEL: &str = "checkpoint.kfs1";
pub const CHECKPOINT_OPTIM: &str = "checkpoint.kfso";

pub fn save_checkpoint(dir: &Path, model: &KfsModel<f32>, opt: &Adam<f32>) -> Result<()> {
    formats::write_atomic(&dir.join(CHECKPOINT_OPTIM), &formats::encode_adam(opt))?;
    formats::write_atomic(&dir.join(CHECKPOINT_MODEL), &formats::encode_condensed(model))
}

/// `None` when no checkpoint exists in `dir`.
pub fn load_checkpoint(dir: &Path) -> Result<Option<(KfsModel<f32>, Adam<f32>)>> {
    let mp = dir.join(CHECKPOINT_MODEL);
    if !mp.exists() {
        return Ok(None);
    }
    let model = formats::decode_condensed(&formats::read_file(&mp)?)?;
    let opt = formats::decode_adam(&formats::read_file(&dir.join(CHECKPOINT_OPTIM))?)?;
    Ok(Some((model, opt)))
}

/// Output of [`condense`].
#[derive(Debug, Clone)]
pub struct Condensed {
    pub model: KfsModel<f32>,
    pub log: Vec<LogRow>,
}

/// Full condensation run in memory.
pub fn condense(cfg: &CondenseConfig, train: &Dataset, cache: Option<&EmbeddingMeanCache>) -> Result<Condensed> {
    let mut c = Condenser::new(cfg, train, cache)?;
    let mut log = Vec::with_capacity(cfg.steps + 1);
    c.run(None, |r| {
        log.push(*r);
        Ok(())
    })?;
    Ok(Condensed {
        model: c.into_model(),
        log,
    })
}

fn default_epochs() -> usize {
    200
}
fn default_batch() -> usize {
    256
}
fn default_eval_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_wd() -> f64 {
    0.0005
}
fn default_decay_factor() -> f64 {
    0.2
}
fn default_decay_epochs() -> Vec<usize> {
    vec![133, 166]
}
fn default_runs() -> usize {
    5
}

/// Classifier training on a condensed set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_eval_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "default_decay_epochs")]
    pub decay_epochs: Vec<usize>,
    /// Total optimizer steps; overrides `epochs` and scales the decay points.
    #[serde(default)]
    pub budget_steps: Option<usize>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch: default_batch(),
            lr: default_eval_lr(),
            momentum: default_momentum(),
            weight_decay: default_wd(),
            decay_factor: default_decay_factor(),
            decay_epochs: default_decay_epochs(),
            budget_steps: None,
            runs: default_runs(),
            width: default_width(),
            depth: default_depth(),
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.runs == 0 {
            return Err(Error::Config("epochs, batch and runs must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("evaluation lr must be positive".into()));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) || self.decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return Err(Error::Config("decay epochs must be strictly increasing and below epochs".into()));
        }
        if self.budget_steps == Some(0) {
            return Err(Error::Config("budget_steps must be positive".into()));
        }
        Ok(())
    }

    /// Total steps and the step schedule for a training set of `n` images.
    pub fn schedule(&self, n: usize) -> (usize, usize, StepSchedule) {
        let batch = self.batch.min(n).max(1);
        let per_epoch = n.div_ceil(batch);
        let natural = self.epochs * per_epoch;
        let total = self.budget_steps.unwrap_or(natural);
        let milestones = self
            .decay_epochs
            .iter()
            .map(|&e| ((e * total) as f64 / self.epochs as f64).round() as usize)
            .collect();
        (
            total,
            batch,
            StepSchedule {
                base_lr: self.lr,
                milestones,
                factor: self.decay_factor,
            },
        )
    }
}

/// Trains a fresh classifier on `set` with run seed `seed`.
pub fn train_classifier(set: &SyntheticDataset<f32>, norm: &Normalization, cfg: &EvalConfig, seed: u64) -> Result<Classifier<f32>> {
    if set.is_empty() {
        return Err(Error::Invalid("cannot train on an empty set".into()));
    }
    let ccfg = ClassifierConfig {
        backbone: FeatureNetConfig::new(set.image_shape(), cfg.width, cfg.depth, seed),
        num_classes: set.num_classes,
    };
    let mut clf = Classifier::<f32>::build(&ccfg)?;
    let n = set.len();
    let (total, batch, schedule) = cfg.schedule(n);
    let mut opt = Sgd::new(clf.params().len(), cfg.lr, cfg.momentum, cfg.weight_decay);
    let x_all = norm.apply(&set.images)?;
    let inner: usize = set.image_shape().iter().product();
    let mut r = rng::stream("eval.batches", seed);
    let mut order = rng::permutation(&mut r, n);
    let mut cursor = 0;
    for step in 0..total {
        if cursor + batch > n {
            order = rng::permutation(&mut r, n);
            cursor = 0;
        }
        let rows = &order[cursor..cursor + batch];
        cursor += batch;
        let mut data = Vec::with_capacity(batch * inner);
        for &i in rows {
            data.extend_from_slice(&x_all.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = set.images.shape().to_vec();
        shape[0] = batch;
        let labels: Vec<usize> = rows.iter().map(|&i| set.labels[i] as usize).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(shape, data)?);
        let pv = clf.register(&mut tape, true);
        let logits = clf.logits_on(&mut tape, xv, &pv)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                value: value as f64,
            });
        }
        let mut grads = tape.backward(loss)?;
        let g: Vec<Tensor<f32>> = pv.iter().map(|&v| grads.take(v).expect("leaf")).collect();
        opt.lr = schedule.lr_at(step);
        opt.update(&mut clf.params_mut(), &g)?;
    }
    Ok(clf)
}

/// Top-1 accuracy on `test`, in percent.
pub fn accuracy(clf: &Classifier<f32>, test: &Dataset) -> Result<f64> {
    const BATCH: usize = 256;
    let idx: Vec<usize> = (0..test.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(BATCH) {
        let x = test.normalization().apply(&test.gather(chunk))?;
        let pred = clf.predict(&x)?;
        correct += chunk.iter().zip(pred).filter(|(&i, p)| test.labels()[i] as usize == *p).count();
    }
    Ok(100.0 * correct as f64 / test.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over runs.
    pub std: f64,
}

impl EvalReport {
    pub fn from_runs(accuracies: Vec<f64>) -> Self {
        let n = accuracies.len().max(1) as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let std = (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self { accuracies, mean, std }
    }
}

/// Accuracy over `cfg.runs` fresh classifiers trained on `set`. The training
/// split is never read; normalization comes with the test set.
pub fn evaluate(set: &SyntheticDataset<f32>, test: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if set.num_classes != test.num_classes() {
        return Err(Error::Invalid(format!(
            "condensed set has {} classes, test set {}",
            set.num_classes,
            test.num_classes()
        )));
    }
    let mut acc = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs as u64 {
        let clf = train_classifier(set, test.normalization(), cfg, cfg.seed.wrapping_add(run))?;
        acc.push(accuracy(&clf, test)?);
    }
    Ok(EvalReport::from_runs(acc))
}

/// [`evaluate`] once per step budget.
pub fn budget_sweep(set: &SyntheticDataset<f32>, test: &Dataset, cfg: &EvalConfig, budgets: &[usize]) -> Result<Vec<(usize, EvalReport)>> {
    budgets
        .iter()
        .map(|&b| {
            let c = EvalConfig {
                budget_steps: Some(b),
                ..cfg.clone()
            };
            Ok((b, evaluate(set, test, &c)?))
        })
        .collect()
}

/// `images_per_class` uniformly drawn distinct examples of each class.
pub fn random_coreset(dataset: &Dataset, images_per_class: usize, seed: u64) -> Result<SyntheticDataset<f32>> {
    let mut r = rng::stream("random_coreset", seed);
    let mut picks = Vec::new();
    let mut labels = Vec::new();
    for class in 0..dataset.num_classes() {
        let idx = dataset.class_indices(class);
        if images_per_class > idx.len() {
            return Err(Error::Invalid(format!(
                "class {class} has {} examples, {images_per_class} requested",
                idx.len()
            )));
        }
        let mut pool = idx.to_vec();
        for k in 0..images_per_class {
            let j = r.random_range(k..pool.len());
            pool.swap(k, j);
            picks.push(pool[k]);
            labels.push(class as u32);
        }
    }
    Ok(SyntheticDataset {
        images: dataset.gather(&picks),
        labels,
        num_classes: dataset.num_classes(),
    })
}

/// The whole dataset as a training set (the full-data control).
pub fn full_set(dataset: &Dataset) -> SyntheticDataset<f32> {
    SyntheticDataset {
        images: dataset.images().clone(),
        labels: dataset.labels().to_vec(),
        num_classes: dataset.num_classes(),
    }
}

/// One grid per class: row `d` shows decoder `d` applied to codes `0..M`.
pub fn class_grids(model: &KfsModel<f32>) -> Result<Vec<Rgb8>> {
    let [_, h, w] = model.image_shape();
    let (m, d) = (model.codes_per_class(), model.num_decoders());
    let set = model.synthesize_all()?;
    let mut out = Vec::with_capacity(model.num_classes());
    for c in 0..model.num_classes() {
        let mut canvas = Rgb8::new(m * w, d * h);
        for code in 0..m {
            for dec in 0..d {
                let i = (c * m + code) * d + dec;
                canvas.paste(&set.images.slice0(i), code * w, dec * h)?;
            }
        }
        out.push(canvas);
    }
    Ok(out)
}

/// Writes `class_<c>.ppm` grids into `dir` and returns their paths.
pub fn export_grids(model: &KfsModel<f32>, dir: &Path) -> Result<Vec<PathBuf>> {
    class_grids(model)?
        .iter()
        .enumerate()
        .map(|(c, g)| {
            let p = dir.join(format!("class_{c}.ppm"));
            formats::write_atomic(&p, &g.encode_ppm())?;
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> Dataset {
        let mut r = rng::stream("test.data", 0);
        let n = 12;
        let images = Tensor::from_fn(&[n, 1, 8, 8], |_| r.random::<f32>());
        let labels = (0..n as u32).map(|i| i % 2).collect();
        Dataset::new(images, labels, 2).unwrap()
    }

    #[test]
    fn eval_schedule_scales_with_budget() {
        let cfg = EvalConfig::default();
        let (total, batch, s) = cfg.schedule(20);
        assert_eq!((total, batch), (200, 20));
        assert_eq!(s.milestones, vec![133, 166]);
        let cfg = EvalConfig {
            budget_steps: Some(100),
            ..EvalConfig::default()
        };
        let (total, _, s) = cfg.schedule(600);
        assert_eq!(total, 100);
        assert_eq!(s.milestones, vec![67, 83]);
    }

    #[test]
    fn eval_config_validation() {
        let bad = EvalConfig {
            decay_epochs: vec![166, 133],
            ..EvalConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = EvalConfig {
            decay_epochs: vec![10, 200],
            ..EvalConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn random_coreset_contract() {
        let ds = tiny_dataset();
        let a = random_coreset(&ds, 1, 3).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a, random_coreset(&ds, 1, 3).unwrap());
        let b = random_coreset(&ds, 6, 3).unwrap();
        let mut seen = std::collections::HashSet::new();
        for i in 0..b.len() {
            let img = b.images.slice0(i);
            let src = (0..ds.len()).find(|&j| ds.gather(&[j]).data() == img.data()).unwrap();
            assert_eq!(ds.labels()[src], b.labels[i]);
            assert!(seen.insert(src));
        }
        assert!(random_coreset(&ds, 7, 3).is_err());
    }

    #[test]
    fn pretrain_zero_steps_keeps_init() {
        let ds = tiny_dataset();
        let spec = DecoderSpec::for_image(DecoderKind::LowR, [1, 8, 8]).unwrap();
        let cfg = PretrainConfig {
            steps: 0,
            ..PretrainConfig::default()
        };
        let p = pretrain_decoder(&ds, &spec, &cfg, 4).unwrap();
        assert_eq!(p.decoder, Decoder::build(&spec, 4).unwrap());
    }

    #[test]
    fn log_rows_format() {
        let r = LogRow {
            step: 3,
            loss: 0.125,
            wall_ms: 17,
        };
        assert_eq!(r.csv(), "3,0.125,17");
    }
}
