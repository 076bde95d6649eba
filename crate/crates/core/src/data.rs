//! Labeled image sets and the decoders for the supported input formats.
//!
//! Images are stored as `[N, C, H, W]` in `[0, 1]`. Normalization statistics
//! travel with the dataset and are applied identically to real and synthetic
//! images before they reach a network.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};
use crate::{Error, Result};

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Population statistics of `images [N, C, H, W]`.
    pub fn compute(images: &Tensor<f32>) -> Self {
        let s = images.shape();
        let (n, c, area) = (s[0], s[1], s[2] * s[3]);
        let mut mean = vec![0.0f32; c];
        let mut std = vec![1.0f32; c];
        for ch in 0..c {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for i in 0..n {
                for &v in &images.data()[(i * c + ch) * area..][..area] {
                    sum += v as f64;
                    sq += (v as f64) * (v as f64);
                }
            }
            let count = (n * area).max(1) as f64;
            let m = sum / count;
            let var = (sq / count - m * m).max(0.0);
            mean[ch] = m as f32;
            std[ch] = (var.sqrt() as f32).max(1e-3);
        }
        Self { mean, std }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::Config(format!(
                "normalization has {} / {} entries for {channels} channels",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("normalization statistics must be finite with positive std".into()));
        }
        Ok(())
    }

    /// Records `(x - mean) / std` on `tape`.
    pub fn apply_on<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var, TensorError> {
        let mean: Vec<T> = self.mean.iter().map(|&v| T::of(v as f64)).collect();
        let std: Vec<T> = self.std.iter().map(|&v| T::of(v as f64)).collect();
        tape.standardize(x, &mean, &std)
    }

    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = self.apply_on(&mut tape, v)?;
        Ok(tape.value(y).clone())
    }
}

/// An in-memory labeled image set.
#[derive(Debug)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<u32>,
    num_classes: usize,
    norm: Normalization,
    by_class: Vec<Vec<usize>>,
    hash: OnceLock<[u8; 32]>,
    reads: AtomicUsize,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Self {
            images: self.images.clone(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            norm: self.norm.clone(),
            by_class: self.by_class.clone(),
            hash: self.hash.clone(),
            reads: AtomicUsize::new(0),
        }
    }
}

impl Dataset {
    /// Validates that images are `[N, C, H, W]` in `[0, 1]` and labels lie in
    /// `[0, num_classes)`. Normalization defaults to the set's own statistics.
    pub fn new(images: Tensor<f32>, labels: Vec<u32>, num_classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 {
            return Err(Error::Invalid(format!("images must be [N, C, H, W], got {s:?}")));
        }
        if s[0] != labels.len() {
            return Err(Error::Invalid(format!(
                "{} images but {} labels",
                s[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Index {
                what: "label",
                index: bad as usize,
                extent: num_classes,
            });
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("image values must lie in [0, 1]".into()));
        }
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l as usize].push(i);
        }
        let norm = Normalization::compute(&images);
        Ok(Self {
            images,
            labels,
            num_classes,
            norm,
            by_class,
            hash: OnceLock::new(),
            reads: AtomicUsize::new(0),
        })
    }

    pub fn with_normalization(mut self, norm: Normalization) -> Result<Self> {
        norm.validate(self.image_shape()[0])?;
        self.norm = norm;
        self.hash = OnceLock::new();
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn class_indices(&self, class: usize) -> &[usize] {
        &self.by_class[class]
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        self.by_class.iter().map(Vec::len).collect()
    }

    /// Number of image reads served so far (an access audit for tests).
    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn images(&self) -> &Tensor<f32> {
        self.reads.fetch_add(self.len(), Ordering::Relaxed);
        &self.images
    }

    /// `[k, C, H, W]` stack of the given rows.
    pub fn gather(&self, indices: &[usize]) -> Tensor<f32> {
        self.reads.fetch_add(indices.len(), Ordering::Relaxed);
        let inner: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * inner..][..inner]);
        }
        let [c, h, w] = self.image_shape();
        Tensor::new(vec![indices.len(), c, h, w], data).expect("gather shape")
    }

    /// SHA-256 over shape, pixels, labels and normalization.
    pub fn content_hash(&self) -> [u8; 32] {
        *self.hash.get_or_init(|| {
            let mut h = Sha256::new();
            h.update(b"kfs.dataset.v1\0");
            for &d in self.images.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update((self.num_classes as u64).to_le_bytes());
            for v in self.images.data() {
                h.update(v.to_le_bytes());
            }
            for l in &self.labels {
                h.update(l.to_le_bytes());
            }
            for v in self.norm.mean.iter().chain(&self.norm.std) {
                h.update(v.to_le_bytes());
            }
            h.finalize().into()
        })
    }

    /// Keeps only `classes` (relabelled `0..classes.len()` in the given
    /// order) and at most `max_per_class` examples of each, in file order.
    pub fn select(&self, classes: &[u32], max_per_class: Option<usize>) -> Result<Self> {
        let mut keep = Vec::new();
        let mut labels = Vec::new();
        for (new, &old) in classes.iter().enumerate() {
            let idx = self.by_class.get(old as usize).ok_or(Error::Index {
                what: "class",
                index: old as usize,
                extent: self.num_classes,
            })?;
            let take = max_per_class.unwrap_or(usize::MAX).min(idx.len());
            keep.extend_from_slice(&idx[..take]);
            labels.extend(std::iter::repeat_n(new as u32, take));
        }
        let mut order: Vec<usize> = (0..keep.len()).collect();
        order.sort_by_key(|&k| keep[k]);
        let keep_sorted: Vec<usize> = order.iter().map(|&k| keep[k]).collect();
        let labels_sorted: Vec<u32> = order.iter().map(|&k| labels[k]).collect();
        let images = self.gather(&keep_sorted);
        Dataset::new(images, labels_sorted, classes.len())?.with_normalization(self.norm.clone())
    }
}

const IDX_UBYTE: u8 = 0x08;

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes(b.try_into().unwrap()))
}

fn le_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
}

fn idx_header(bytes: &[u8]) -> Result<Vec<usize>> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::format("idx", "missing magic"));
    }
    if bytes[2] != IDX_UBYTE {
        return Err(Error::format("idx", format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let d = be_u32(bytes, 4 + 4 * i).ok_or_else(|| Error::format("idx", "truncated header"))?;
        dims.push(d as usize);
    }
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("idx", "dimension product overflows"))?;
    let body = bytes.len() - 4 - 4 * rank;
    if body != expected {
        return Err(Error::format("idx", format!("expected {expected} data bytes, found {body}")));
    }
    Ok(dims)
}

/// IDX unsigned-byte images of rank 3 (`N, H, W`) or 4 (`N, C, H, W`),
/// scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    let dims = idx_header(bytes)?;
    let shape = match dims.as_slice() {
        [n, h, w] => vec![*n, 1, *h, *w],
        [n, c, h, w] => vec![*n, *c, *h, *w],
        _ => return Err(Error::format("idx", format!("image rank must be 3 or 4, got {}", dims.len()))),
    };
    let data = bytes[4 + 4 * dims.len()..].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::new(shape, data)?)
}

/// IDX unsigned-byte rank-1 label vector.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u32>> {
    let dims = idx_header(bytes)?;
    if dims.len() != 1 {
        return Err(Error::format("idx", format!("label rank must be 1, got {}", dims.len())));
    }
    Ok(bytes[8..].iter().map(|&b| b as u32).collect())
}

/// Writes an IDX unsigned-byte file (rank 3 images or rank 1 labels).
pub fn encode_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, IDX_UBYTE, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// CIFAR-10 binary batches: records of one label byte then 3072 channel-major pixels.
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Tensor<f32>, Vec<u32>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::format(
            "cifar10",
            format!("length {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(Error::format("cifar10", format!("label {} out of range", rec[0])));
        }
        labels.push(rec[0] as u32);
        data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((Tensor::new(vec![n, 3, 32, 32], data)?, labels))
}

pub const RAW_F32_MAGIC: &[u8; 4] = b"KFST";
const RAW_MAX_RANK: usize = 8;

/// Raw tensor dump: `"KFST"`, `u32` rank, `u32` dims, then `f32` values, all
/// little-endian.
pub fn parse_raw_f32(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.get(..4) != Some(RAW_F32_MAGIC) {
        return Err(Error::format("raw-f32", "missing KFST magic"));
    }
    let rank = le_u32(bytes, 4).ok_or_else(|| Error::format("raw-f32", "truncated header"))? as usize;
    if rank > RAW_MAX_RANK {
        return Err(Error::format("raw-f32", format!("rank {rank} exceeds {RAW_MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(le_u32(bytes, 8 + 4 * i).ok_or_else(|| Error::format("raw-f32", "truncated header"))? as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("raw-f32", "dimension product overflows"))?;
    let body = &bytes[8 + 4 * rank..];
    if Some(body.len()) != count.checked_mul(4) {
        return Err(Error::format(
            "raw-f32",
            format!("expected {count} values, found {} bytes", body.len()),
        ));
    }
    let data = body.chunks_exact(4).map(f32::read_le).collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn encode_raw_f32(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = RAW_F32_MAGIC.to_vec();
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceFormat {
    Idx,
    Cifar10Binary,
    RawF32,
}

/// Paths of one split. `labels` is unused for CIFAR-10 batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPaths {
    pub images: Vec<PathBuf>,
    #[serde(default)]
    pub labels: Vec<PathBuf>,
}

/// Where a dataset lives and how to decode it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSource {
    pub format: SourceFormat,
    pub train: SplitPaths,
    pub test: SplitPaths,
    /// Source classes to keep, relabelled in this order. All classes when absent.
    #[serde(default)]
    pub classes: Option<Vec<u32>>,
    #[serde(default)]
    pub max_train_per_class: Option<usize>,
    #[serde(default)]
    pub max_test_per_class: Option<usize>,
    /// Supplied statistics; computed from the training split when absent.
    #[serde(default)]
    pub normalization: Option<Normalization>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

impl DatasetSource {
    /// Loads `(train, test)`; relative paths resolve against `base`. Both
    /// splits share the training normalization.
    pub fn load(&self, base: &Path) -> Result<(Dataset, Dataset)> {
        let train = self.load_split(&self.train, base)?;
        let test = self.load_split(&self.test, base)?;
        let classes: Vec<u32> = match &self.classes {
            Some(c) => c.clone(),
            None => (0..train.num_classes as u32).collect(),
        };
        let train = train.select(&classes, self.max_train_per_class)?;
        let test = test.select(&classes, self.max_test_per_class)?;
        let norm = match &self.normalization {
            Some(n) => n.clone(),
            None => Normalization::compute(&train.images),
        };
        let train = train.with_normalization(norm.clone())?;
        let test = test.with_normalization(norm)?;
        Ok((train, test))
    }

    fn load_split(&self, split: &SplitPaths, base: &Path) -> Result<Dataset> {
        let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        let mut parts = Vec::new();
        let mut labels = Vec::new();
        match self.format {
            SourceFormat::Cifar10Binary => {
                for p in &split.images {
                    let (imgs, l) = parse_cifar10(&read(&resolve(p))?)?;
                    parts.push(imgs);
                    labels.extend(l);
                }
            }
            SourceFormat::Idx | SourceFormat::RawF32 => {
                if split.images.len() != split.labels.len() {
                    return Err(Error::Config("each image file needs a label file".into()));
                }
                for (ip, lp) in split.images.iter().zip(&split.labels) {
                    let imgs = match self.format {
                        SourceFormat::Idx => parse_idx_images(&read(&resolve(ip))?)?,
                        _ => parse_raw_f32(&read(&resolve(ip))?)?,
                    };
                    parts.push(imgs);
                    labels.extend(parse_idx_labels(&read(&resolve(lp))?)?);
                }
            }
        }
        let images = concat_images(parts)?;
        let num_classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
        Dataset::new(images, labels, num_classes)
    }
}

fn concat_images(parts: Vec<Tensor<f32>>) -> Result<Tensor<f32>> {
    let mut iter = parts.into_iter();
    let first = iter.next().ok_or_else(|| Error::Config("split lists no image files".into()))?;
    let mut shape = first.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Invalid(format!("images must be [N, C, H, W], got {shape:?}")));
    }
    let mut data = first.into_data();
    for p in iter {
        if p.shape()[1..] != shape[1..] {
            return Err(Error::Invalid("image files disagree on image shape".into()));
        }
        shape[0] += p.shape()[0];
        data.extend(p.into_data());
    }
    Ok(Tensor::new(shape, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_round_trip() {
        let bytes = encode_idx(&[2, 2, 3], &[0, 255, 51, 0, 0, 0, 1, 2, 3, 4, 5, 6]);
        let t = parse_idx_images(&bytes).unwrap();
        assert_eq!(t.shape(), &[2, 1, 2, 3]);
        assert_eq!(t.data()[1], 1.0);
        assert_eq!(t.data()[2], 0.2);
        let l = parse_idx_labels(&encode_idx(&[3], &[1, 0, 7])).unwrap();
        assert_eq!(l, vec![1, 0, 7]);
    }

    #[test]
    fn idx_rejects_truncation_and_bad_magic() {
        let mut bytes = encode_idx(&[2, 2, 2], &[0; 8]);
        bytes.pop();
        assert!(parse_idx_images(&bytes).is_err());
        assert!(parse_idx_images(&[1, 0, 8, 1]).is_err());
        assert!(parse_idx_labels(&encode_idx(&[1, 1], &[0])).is_err());
        // Huge declared dims against a tiny body must not allocate.
        assert!(parse_idx_images(&encode_idx(&[u32::MAX as usize, 65535, 65535], &[])).is_err());
    }

    #[test]
    fn cifar_records() {
        let mut rec = vec![3u8];
        rec.extend(std::iter::repeat_n(255u8, 3072));
        let (t, l) = parse_cifar10(&rec).unwrap();
        assert_eq!(t.shape(), &[1, 3, 32, 32]);
        assert_eq!(l, vec![3]);
        rec[0] = 10;
        assert!(parse_cifar10(&rec).is_err());
        assert!(parse_cifar10(&rec[..100]).is_err());
    }

    #[test]
    fn raw_round_trip() {
        let t = Tensor::new(vec![2, 1, 1, 2], vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        assert_eq!(parse_raw_f32(&encode_raw_f32(&t)).unwrap(), t);
        assert!(parse_raw_f32(b"KFST\x09\0\0\0").is_err());
    }

    #[test]
    fn dataset_validates_labels_and_range() {
        let imgs = Tensor::full(&[2, 1, 2, 2], 0.5);
        assert!(Dataset::new(imgs.clone(), vec![0, 2], 2).is_err());
        assert!(Dataset::new(Tensor::full(&[1, 1, 2, 2], 1.5), vec![0], 1).is_err());
        let d = Dataset::new(imgs, vec![1, 0], 2).unwrap();
        assert_eq!(d.class_indices(1), &[0]);
    }

    #[test]
    fn select_relabels_and_caps() {
        let imgs = Tensor::from_fn(&[6, 1, 1, 2], |i| (i as f32) / 12.0);
        let d = Dataset::new(imgs, vec![0, 1, 2, 1, 2, 2], 3).unwrap();
        let s = d.select(&[2, 1], Some(2)).unwrap();
        assert_eq!(s.labels(), &[1, 0, 1, 0]);
        assert_eq!(s.class_sizes(), vec![2, 2]);
        assert_eq!(s.normalization(), d.normalization());
    }

    #[test]
    fn access_audit_counts_reads() {
        let d = Dataset::new(Tensor::full(&[3, 1, 2, 2], 0.1), vec![0, 1, 0], 2).unwrap();
        assert_eq!(d.reads(), 0);
        let _ = d.gather(&[0, 2]);
        assert_eq!(d.reads(), 2);
        let _ = d.content_hash();
        assert_eq!(d.reads(), 2);
    }
}
