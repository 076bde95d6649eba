//! Mean-embedding matching between real and synthetic classes.
//!
//! For class targets `mu_c` (mean real embedding) and synthetic means
//! `s_c = mean_{m,d} g(f(theta_{c,m}; phi_d))` the loss is
//! `(1/C) sum_c 0.5 * ||mu_c - s_c||^2`.
//!
//! [`exact_gradient`] bounds memory by differentiating one chunk of triples
//! at a time against the residual `s_c - mu_c` of the full synthetic mean, so
//! the chunk sums equal the full gradient for every partition.

use std::collections::HashSet;
use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::data::{Dataset, Normalization};
use crate::factorization::{KfsGradient, KfsModel, ModelVars, Triple};
use crate::formats::{self, MeanEntry};
use crate::nets::{FeatureNet, FeatureNetConfig};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

/// A feature net, the input normalization it expects, and per-class targets.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a, T: Scalar> {
    pub net: &'a FeatureNet<T>,
    pub norm: &'a Normalization,
    /// `[C, E]`.
    pub targets: &'a Tensor<T>,
}

impl<T: Scalar> Objective<'_, T> {
    fn check(&self, model: &KfsModel<T>) -> Result<()> {
        let want = [model.num_classes(), self.net.embed_dim()];
        if self.targets.shape() != want {
            return Err(Error::Invalid(format!(
                "targets have shape {:?}, expected {want:?} for this feature net",
                self.targets.shape()
            )));
        }
        if model.image_shape() != self.net.config().input_shape {
            return Err(Error::Invalid(format!(
                "decoders produce {:?} images, feature net expects {:?}",
                model.image_shape(),
                self.net.config().input_shape
            )));
        }
        Ok(())
    }
}

/// Normalized embeddings `[k, E]` of the given triples, recorded on `tape`.
pub fn embed_triples_on<T: Scalar>(
    tape: &mut Tape<T>,
    model: &KfsModel<T>,
    vars: &ModelVars,
    net: &FeatureNet<T>,
    norm: &Normalization,
    triples: &[Triple],
) -> Result<Var> {
    let images = model.render_on(tape, vars, triples)?;
    let x = norm.apply_on(tape, images)?;
    Ok(net.embed_on(tape, x)?)
}

/// `(1/C) sum_c 0.5 * ||mu_c - mean_{t in selection[c]} g(t)||^2`.
///
/// Each class averages over its own selection; the full loss selects every
/// `(m, d)` of every class.
pub fn selection_loss_on<T: Scalar>(
    tape: &mut Tape<T>,
    model: &KfsModel<T>,
    vars: &ModelVars,
    obj: &Objective<T>,
    targets: Var,
    selection: &[Vec<Triple>],
) -> Result<Var> {
    let c = model.num_classes();
    if selection.len() != c {
        return Err(Error::Invalid(format!("selection covers {} of {c} classes", selection.len())));
    }
    let mut flat = Vec::new();
    let mut spans = Vec::with_capacity(c);
    for (class, sel) in selection.iter().enumerate() {
        if sel.is_empty() || sel.iter().any(|t| t.c != class) {
            return Err(Error::Invalid(format!("selection for class {class} is empty or foreign")));
        }
        spans.push(flat.len()..flat.len() + sel.len());
        flat.extend_from_slice(sel);
    }
    let emb = embed_triples_on(tape, model, vars, obj.net, obj.norm, &flat)?;
    let e = obj.net.embed_dim();
    let mut means = Vec::with_capacity(c);
    for span in spans {
        let rows: Vec<usize> = span.collect();
        let m = tape.row_mean(emb, &rows)?;
        means.push(tape.reshape(m, &[1, e])?);
    }
    let s = tape.concat0(&means)?;
    let diff = tape.sub(targets, s)?;
    let sq = tape.dot(diff, diff)?;
    Ok(tape.scale(sq, T::of(0.5 / c as f64)))
}

/// Every `(m, d)` of every class, grouped by class.
pub fn full_selection<T: Scalar>(model: &KfsModel<T>) -> Vec<Vec<Triple>> {
    let d = model.num_decoders();
    let m = model.codes_per_class();
    model.triples().chunks(m * d).map(<[Triple]>::to_vec).collect()
}

pub fn mmd_loss<T: Scalar>(model: &KfsModel<T>, obj: &Objective<T>) -> Result<T> {
    obj.check(model)?;
    let mut tape = Tape::new();
    let vars = model.record(&mut tape, false)?;
    let targets = tape.constant(obj.targets.clone());
    let loss = selection_loss_on(&mut tape, model, &vars, obj, targets, &full_selection(model))?;
    Ok(tape.value(loss).item())
}

/// Loss and gradient of a class-wise selection, by one backward pass.
pub fn selection_gradient<T: Scalar>(
    model: &KfsModel<T>,
    obj: &Objective<T>,
    targets: &Tensor<T>,
    selection: &[Vec<Triple>],
) -> Result<(T, KfsGradient<T>)> {
    obj.check(model)?;
    let mut tape = Tape::new();
    let vars = model.record(&mut tape, true)?;
    let t = tape.constant(targets.clone());
    let loss = selection_loss_on(&mut tape, model, &vars, obj, t, selection)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    Ok((value, model.gradient_from(&vars, &grads)))
}

/// Loss and gradient over all classes and all `(m, d)` pairs.
pub fn full_gradient<T: Scalar>(model: &KfsModel<T>, obj: &Objective<T>) -> Result<(T, KfsGradient<T>)> {
    selection_gradient(model, obj, obj.targets, &full_selection(model))
}

/// Untracked synthetic class means `[C, E]`.
pub fn synthetic_means<T: Scalar>(model: &KfsModel<T>, net: &FeatureNet<T>, norm: &Normalization) -> Result<Tensor<T>> {
    let images = model.render(&model.triples())?;
    let emb = net.embed(&norm.apply(&images)?)?;
    let per_class = model.codes_per_class() * model.num_decoders();
    let e = net.embed_dim();
    let inv = T::one() / T::of(per_class as f64);
    let mut out = vec![T::zero(); model.num_classes() * e];
    for (row, v) in emb.data().chunks(e).enumerate() {
        let c = row / per_class;
        for (o, &x) in out[c * e..(c + 1) * e].iter_mut().zip(v) {
            *o += x;
        }
    }
    for o in &mut out {
        *o *= inv;
    }
    Ok(Tensor::new(vec![model.num_classes(), e], out)?)
}

/// Loss and residual `s_c - mu_c` from the full synthetic mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual<T: Scalar> {
    pub loss: T,
    /// `[C, E]`.
    pub r: Tensor<T>,
}

pub fn residual<T: Scalar>(model: &KfsModel<T>, obj: &Objective<T>) -> Result<Residual<T>> {
    obj.check(model)?;
    let s = synthetic_means(model, obj.net, obj.norm)?;
    let mut r = s;
    for (x, &mu) in r.data_mut().iter_mut().zip(obj.targets.data()) {
        *x -= mu;
    }
    let c = model.num_classes() as f64;
    let loss = T::of(0.5 * r.dot(&r).as_f64() / c);
    Ok(Residual { loss, r })
}

/// Gradient contribution of `chunk`: the gradient of
/// `sum_{t in chunk} r_{c_t} . g(f_t) / (C * M * D)` with `r` held fixed.
pub fn chunk_gradient<T: Scalar>(
    model: &KfsModel<T>,
    obj: &Objective<T>,
    residual: &Residual<T>,
    chunk: &[Triple],
) -> Result<KfsGradient<T>> {
    if chunk.is_empty() {
        return Ok(model.zero_gradient());
    }
    let mut tape = Tape::new();
    let vars = model.record(&mut tape, true)?;
    let emb = embed_triples_on(&mut tape, model, &vars, obj.net, obj.norm, chunk)?;
    let e = obj.net.embed_dim();
    let w = 1.0 / (model.num_classes() * model.codes_per_class() * model.num_decoders()) as f64;
    let w = T::of(w);
    let mut weights = Vec::with_capacity(chunk.len() * e);
    for t in chunk {
        weights.extend(residual.r.data()[t.c * e..(t.c + 1) * e].iter().map(|&v| v * w));
    }
    let weights = tape.constant(Tensor::new(vec![chunk.len(), e], weights)?);
    let surrogate = tape.dot(emb, weights)?;
    let grads = tape.backward(surrogate)?;
    Ok(model.gradient_from(&vars, &grads))
}

/// Verifies that `chunks` cover every triple of `model` exactly once.
pub fn check_partition<T: Scalar>(model: &KfsModel<T>, chunks: &[Vec<Triple>]) -> Result<()> {
    let mut seen = HashSet::new();
    for t in chunks.iter().flatten() {
        model.check_triple(*t)?;
        if !seen.insert(*t) {
            return Err(Error::Invalid(format!(
                "triple ({}, {}, {}) appears in more than one chunk",
                t.c, t.m, t.d
            )));
        }
    }
    let total = model.num_classes() * model.codes_per_class() * model.num_decoders();
    if seen.len() != total {
        return Err(Error::Invalid(format!("chunks cover {} of {total} triples", seen.len())));
    }
    Ok(())
}

/// Full loss and gradient accumulated chunk by chunk in the given order.
pub fn exact_gradient<T: Scalar>(
    model: &KfsModel<T>,
    obj: &Objective<T>,
    chunks: &[Vec<Triple>],
) -> Result<(T, KfsGradient<T>)> {
    check_partition(model, chunks)?;
    let res = residual(model, obj)?;
    let mut total = model.zero_gradient();
    for chunk in chunks {
        total.add_assign(&chunk_gradient(model, obj, &res, chunk)?);
    }
    Ok((res.loss, total))
}

/// A contiguous range of classes handled together.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassShard {
    pub classes: Range<usize>,
}

impl ClassShard {
    /// Splits `0..classes` into `shards` contiguous, nearly equal ranges.
    pub fn split(classes: usize, shards: usize) -> Vec<ClassShard> {
        let shards = shards.clamp(1, classes.max(1));
        let base = classes / shards;
        let extra = classes % shards;
        let mut start = 0;
        (0..shards)
            .map(|i| {
                let len = base + usize::from(i < extra);
                let s = ClassShard {
                    classes: start..start + len,
                };
                start += len;
                s
            })
            .collect()
    }
}

/// Class-major chunks of at most `chunk_size` triples, each within one shard.
pub fn shard_chunks<T: Scalar>(model: &KfsModel<T>, shards: &[ClassShard], chunk_size: usize) -> Vec<Vec<Triple>> {
    let per_class = model.codes_per_class() * model.num_decoders();
    let triples = model.triples();
    let size = chunk_size.max(1);
    let mut out = Vec::new();
    for s in shards {
        let members = &triples[s.classes.start * per_class..s.classes.end * per_class];
        out.extend(members.chunks(size).map(<[Triple]>::to_vec));
    }
    out
}

/// Per-class means `[C, E]` of `net` over every example, accumulated in f64.
pub fn class_means<T: Scalar>(dataset: &Dataset, net: &FeatureNet<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    const BATCH: usize = 256;
    let e = net.embed_dim();
    let c = dataset.num_classes();
    let mut out = Vec::with_capacity(c * e);
    let mut counts = Vec::with_capacity(c);
    for class in 0..c {
        let idx = dataset.class_indices(class);
        if idx.is_empty() {
            return Err(Error::Invalid(format!("class {class} has no examples")));
        }
        let mut acc = vec![0.0f64; e];
        for batch in idx.chunks(BATCH) {
            let x = dataset.normalization().apply(&dataset.gather(batch).cast::<T>())?;
            let emb = net.embed(&x)?;
            for row in emb.data().chunks(e) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v.as_f64();
                }
            }
        }
        let inv = 1.0 / idx.len() as f64;
        out.extend(acc.iter().map(|&a| T::of(a * inv)));
        counts.push(idx.len());
    }
    Ok((Tensor::new(vec![c, e], out)?, counts))
}

/// Identity of one cache entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeanKey {
    pub dataset_hash: [u8; 32],
    pub cfg_digest: [u8; 32],
    pub seed: u64,
}

impl MeanKey {
    pub fn new(dataset: &Dataset, cfg: &FeatureNetConfig, seed: u64) -> Self {
        Self {
            dataset_hash: dataset.content_hash(),
            cfg_digest: cfg.digest(),
            seed,
        }
    }

    pub fn file_name(&self) -> String {
        let hex = |b: &[u8]| b.iter().map(|x| format!("{x:02x}")).collect::<String>();
        format!("{}-{}-{}.kfsm", hex(&self.dataset_hash[..8]), hex(&self.cfg_digest[..8]), self.seed)
    }

    fn matches(&self, e: &MeanEntry) -> bool {
        e.dataset_hash == self.dataset_hash && e.cfg_digest == self.cfg_digest && e.seed == self.seed
    }
}

/// Directory of `KFSM` files, one per key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingMeanCache {
    dir: PathBuf,
}

impl EmbeddingMeanCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, key: &MeanKey) -> PathBuf {
        self.dir.join(key.file_name())
    }

    /// `Ok(None)` on a miss; an error when the file exists but is unusable.
    pub fn load(&self, key: &MeanKey) -> Result<Option<MeanEntry>> {
        let path = self.path(key);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(path, e)),
        };
        let entry = formats::decode_means(&bytes)?;
        if !key.matches(&entry) {
            return Err(Error::format("KFSM", "entry key does not match file name"));
        }
        Ok(Some(entry))
    }

    pub fn store(&self, entry: &MeanEntry) -> Result<()> {
        let key = MeanKey {
            dataset_hash: entry.dataset_hash,
            cfg_digest: entry.cfg_digest,
            seed: entry.seed,
        };
        formats::write_atomic(&self.path(&key), &formats::encode_means(entry))
    }
}

/// Class means of the feature net built from `cfg` with `seed`, served from
/// `cache` when present. Unreadable entries are recomputed and overwritten.
pub fn compute_or_load_means(
    dataset: &Dataset,
    cfg: &FeatureNetConfig,
    seed: u64,
    cache: Option<&EmbeddingMeanCache>,
) -> Result<MeanEntry> {
    let key = MeanKey::new(dataset, cfg, seed);
    if let Some(cache) = cache {
        match cache.load(&key) {
            Ok(Some(entry)) if entry.means.shape() == [dataset.num_classes(), cfg.embed_dim()] => return Ok(entry),
            Ok(Some(_)) => log::warn!("cache entry {} has the wrong shape, recomputing", key.file_name()),
            Ok(None) => {}
            Err(e) => log::warn!("cache entry {} unusable ({e}), recomputing", key.file_name()),
        }
    }
    let net = FeatureNet::<f32>::build(&cfg.with_seed(seed))?;
    let (means, counts) = class_means(dataset, &net)?;
    let entry = MeanEntry {
        dataset_hash: key.dataset_hash,
        cfg_digest: key.cfg_digest,
        seed,
        counts,
        means,
    };
    if let Some(cache) = cache {
        cache.store(&entry)?;
    }
    Ok(entry)
}
