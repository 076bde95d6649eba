//! On-disk formats. All binary layouts are little-endian, start with a
//! four-byte magic and end with a SHA-256 of everything before it.
//!
//! | magic  | contents                                             |
//! |--------|------------------------------------------------------|
//! | `KFS1` | condensed set: codebook, decoder bank, class labels  |
//! | `KFSM` | per-class real embedding means for one feature net   |
//! | `KFSO` | Adam state for resuming condensation                 |

use std::path::Path;

use serde::de::DeserializeOwned;
use sha2::{Digest, Sha256};

use crate::factorization::{DecoderBank, KfsModel, LatentCodebook};
use crate::nets::{ConvLayer, Decoder, DecoderKind, DecoderSpec};
use crate::optim::Adam;
use crate::tensor::{DType, Scalar, Tensor};
use crate::{Error, Result};

pub const CONDENSED_MAGIC: &[u8; 4] = b"KFS1";
pub const MEANS_MAGIC: &[u8; 4] = b"KFSM";
pub const OPTIM_MAGIC: &[u8; 4] = b"KFSO";
pub const FORMAT_VERSION: u16 = 1;
pub const SCHEMA_VERSION: u32 = 1;

/// Largest element count any decoder accepts for a single buffer.
const MAX_ELEMENTS: usize = 1 << 28;

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut w = Writer(magic.to_vec());
        w.u16(FORMAT_VERSION);
        w
    }

    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }

    fn values<T: Scalar>(&mut self, t: &Tensor<T>) {
        for &v in t.data() {
            v.write_le(&mut self.0);
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let sum: [u8; 32] = Sha256::digest(&self.0).into();
        self.0.extend_from_slice(&sum);
        self.0
    }
}

struct Reader<'a> {
    format: &'static str,
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic, version and trailing checksum.
    fn open(format: &'static str, magic: &[u8; 4], bytes: &'a [u8]) -> Result<Self> {
        if bytes.len() < 4 + 2 + 32 {
            return Err(Error::format(format, "file too short"));
        }
        if &bytes[..4] != magic {
            return Err(Error::format(format, "bad magic"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        let want: [u8; 32] = Sha256::digest(body).into();
        if want[..] != sum[..] {
            return Err(Error::format(format, "checksum mismatch"));
        }
        let mut r = Reader { format, buf: body, at: 4 };
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(format, format!("unsupported version {version}")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format(self.format, "truncated"))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn array32(&mut self) -> Result<[u8; 32]> {
        Ok(self.take(32)?.try_into().unwrap())
    }

    fn dims(&mut self, rank: usize) -> Result<Vec<usize>> {
        (0..rank).map(|_| self.u32()).collect()
    }

    fn values<T: Scalar>(&mut self, shape: &[usize]) -> Result<Tensor<T>> {
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| Error::format(self.format, "buffer too large"))?;
        let size = T::DTYPE.size();
        let raw = self.take(n * size)?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        Ok(Tensor::new(shape.to_vec(), data)?)
    }

    fn done(&self) -> Result<()> {
        if self.at != self.buf.len() {
            return Err(Error::format(self.format, "trailing bytes"));
        }
        Ok(())
    }
}

fn expect_dtype<T: Scalar>(format: &'static str, code: u8) -> Result<()> {
    match DType::from_code(code) {
        Some(d) if d == T::DTYPE => Ok(()),
        Some(d) => Err(Error::format(format, format!("stored dtype {d}, requested {}", T::DTYPE))),
        None => Err(Error::format(format, format!("unknown dtype code {code}"))),
    }
}

/// Serializes a condensed set.
pub fn encode_condensed<T: Scalar>(model: &KfsModel<T>) -> Vec<u8> {
    let spec = model.bank.spec();
    let mut w = Writer::new(CONDENSED_MAGIC);
    w.u8(T::DTYPE.code());
    w.u8(spec.kind.code());
    w.u32(model.num_classes());
    w.u32(model.codes_per_class());
    w.u32(model.num_decoders());
    for &d in &spec.code_shape {
        w.u32(d);
    }
    w.u32(spec.out_channels);
    w.values(model.codebook.codes());
    for dec in model.bank.decoders() {
        for layer in dec.layers() {
            w.values(&layer.weight);
            w.values(&layer.bias);
        }
    }
    for &id in model.codebook.class_ids() {
        w.u32(id as usize);
    }
    w.finish()
}

/// Dtype stored in a condensed-set file, without decoding the rest.
pub fn condensed_dtype(bytes: &[u8]) -> Result<DType> {
    if bytes.len() < 7 || &bytes[..4] != CONDENSED_MAGIC {
        return Err(Error::format("KFS1", "bad magic"));
    }
    DType::from_code(bytes[6]).ok_or_else(|| Error::format("KFS1", "unknown dtype"))
}

pub fn decode_condensed<T: Scalar>(bytes: &[u8]) -> Result<KfsModel<T>> {
    const F: &str = "KFS1";
    let mut r = Reader::open(F, CONDENSED_MAGIC, bytes)?;
    expect_dtype::<T>(F, r.u8()?)?;
    let kind = DecoderKind::from_code(r.u8()?).ok_or_else(|| Error::format(F, "unknown decoder kind"))?;
    let (c, m, d) = (r.u32()?, r.u32()?, r.u32()?);
    let code_shape = [r.u32()?, r.u32()?, r.u32()?];
    let out_channels = r.u32()?;
    if m == 0 || d == 0 {
        return Err(Error::format(F, "empty codebook or decoder bank"));
    }
    let spec = DecoderSpec::new(kind, code_shape, out_channels).map_err(|e| Error::format(F, e.to_string()))?;
    let codes = r.values::<T>(&[c, m, code_shape[0], code_shape[1], code_shape[2]])?;
    let template = Decoder::<T>::zeros(&spec)?;
    let mut decoders = Vec::with_capacity(d.min(1024));
    for _ in 0..d {
        let layers = template
            .layers()
            .iter()
            .map(|l| {
                Ok(ConvLayer {
                    weight: r.values(l.weight.shape())?,
                    bias: r.values(l.bias.shape())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        decoders.push(Decoder::from_layers(&spec, layers)?);
    }
    let class_ids = (0..c).map(|_| r.u32().map(|v| v as u32)).collect::<Result<Vec<_>>>()?;
    r.done()?;
    let codebook = LatentCodebook::new(codes, class_ids).map_err(|e| Error::format(F, e.to_string()))?;
    KfsModel::new(codebook, DecoderBank::new(decoders)?)
}

/// One cache entry: per-class means of a single feature net over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanEntry {
    pub dataset_hash: [u8; 32],
    pub cfg_digest: [u8; 32],
    pub seed: u64,
    /// Real examples averaged per class.
    pub counts: Vec<usize>,
    /// `[C, E]`.
    pub means: Tensor<f32>,
}

pub fn encode_means(e: &MeanEntry) -> Vec<u8> {
    let mut w = Writer::new(MEANS_MAGIC);
    w.bytes(&e.dataset_hash);
    w.bytes(&e.cfg_digest);
    w.u64(e.seed);
    w.u32(e.means.shape()[0]);
    w.u32(e.means.shape()[1]);
    for &n in &e.counts {
        w.u32(n);
    }
    w.values(&e.means);
    w.finish()
}

pub fn decode_means(bytes: &[u8]) -> Result<MeanEntry> {
    let mut r = Reader::open("KFSM", MEANS_MAGIC, bytes)?;
    let dataset_hash = r.array32()?;
    let cfg_digest = r.array32()?;
    let seed = r.u64()?;
    let (c, e) = (r.u32()?, r.u32()?);
    let counts = r.dims(c.min(bytes.len()))?;
    let means = r.values(&[c, e])?;
    r.done()?;
    Ok(MeanEntry {
        dataset_hash,
        cfg_digest,
        seed,
        counts,
        means,
    })
}

pub fn encode_adam<T: Scalar>(opt: &Adam<T>) -> Vec<u8> {
    let mut w = Writer::new(OPTIM_MAGIC);
    w.u8(T::DTYPE.code());
    w.u64(opt.step);
    w.f64(opt.beta1);
    w.f64(opt.beta2);
    w.f64(opt.eps);
    w.u32(opt.m.len());
    for ((m, v), &lr) in opt.m.iter().zip(&opt.v).zip(&opt.lrs) {
        w.f64(lr);
        w.u32(m.shape().len());
        for &d in m.shape() {
            w.u32(d);
        }
        w.values(m);
        w.values(v);
    }
    w.finish()
}

pub fn decode_adam<T: Scalar>(bytes: &[u8]) -> Result<Adam<T>> {
    const F: &str = "KFSO";
    let mut r = Reader::open(F, OPTIM_MAGIC, bytes)?;
    expect_dtype::<T>(F, r.u8()?)?;
    let step = r.u64()?;
    let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
    let count = r.u32()?;
    let (mut lrs, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..count {
        lrs.push(r.f64()?);
        let rank = r.u32()?;
        if rank > 8 {
            return Err(Error::format(F, "tensor rank too large"));
        }
        let shape = r.dims(rank)?;
        m.push(r.values(&shape)?);
        v.push(r.values(&shape)?);
    }
    r.done()?;
    Ok(Adam {
        lrs,
        beta1,
        beta2,
        eps,
        step,
        m,
        v,
    })
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses a JSON config whose `schema_version` must equal [`SCHEMA_VERSION`].
pub fn parse_config<C: DeserializeOwned>(text: &str) -> Result<C> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::format("json", e.to_string()))?;
    match value.get("schema_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == SCHEMA_VERSION as u64 => {}
        Some(v) => return Err(Error::Config(format!("unsupported schema_version {v}"))),
        None => return Err(Error::Config("missing schema_version".into())),
    }
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_config<C: DeserializeOwned>(path: &Path) -> Result<C> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// An 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Rgb8 {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    /// Pastes a `[C, H, W]` image in `[0, 1]` with its top-left corner at
    /// `(x, y)`. Single-channel images are replicated to gray.
    pub fn paste<T: Scalar>(&mut self, img: &Tensor<T>, x: usize, y: usize) -> Result<()> {
        let s = img.shape();
        if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
            return Err(Error::Invalid(format!("expected [1|3, H, W] image, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if x + w > self.width || y + h > self.height {
            return Err(Error::Invalid("tile outside canvas".into()));
        }
        let q = |v: T| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
        for i in 0..h {
            for j in 0..w {
                let at = ((y + i) * self.width + x + j) * 3;
                for k in 0..3 {
                    let ch = if c == 1 { 0 } else { k };
                    self.pixels[at + k] = q(img.data()[(ch * h + i) * w + j]);
                }
            }
        }
        Ok(())
    }

    /// Binary `P6` encoding.
    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Parses a binary `P6` file with maxval 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<Rgb8> {
    const F: &str = "ppm";
    let mut fields = Vec::with_capacity(4);
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if at < bytes.len() && bytes[at] == b'#' {
            while at < bytes.len() && bytes[at] != b'\n' {
                at += 1;
            }
            continue;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(Error::format(F, "truncated header"));
        }
        fields.push(&bytes[start..at]);
    }
    if fields[0] != b"P6" {
        return Err(Error::format(F, "not a P6 file"));
    }
    let num = |b: &[u8]| {
        std::str::from_utf8(b)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::format(F, "bad header number"))
    };
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(Error::format(F, "only maxval 255 is supported"));
    }
    let n = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::format(F, "dimensions overflow"))?;
    let body = bytes.get(at + 1..).unwrap_or(&[]);
    if at >= bytes.len() || body.len() != n {
        return Err(Error::format(F, format!("expected {n} pixel bytes")));
    }
    Ok(Rgb8 {
        width,
        height,
        pixels: body.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorization::LatentCodebook;

    fn model() -> KfsModel<f32> {
        let spec = DecoderSpec::new(DecoderKind::HighR, [12, 2, 2], 1).unwrap();
        let cb = LatentCodebook::gaussian(2, 3, [12, 2, 2], 1.0, 1).unwrap();
        KfsModel::new(cb, DecoderBank::build(&spec, 2, 5).unwrap()).unwrap()
    }

    #[test]
    fn condensed_round_trip() {
        let m = model();
        let bytes = encode_condensed(&m);
        assert_eq!(&bytes[..4], b"KFS1");
        assert_eq!(condensed_dtype(&bytes).unwrap(), DType::F32);
        assert_eq!(decode_condensed::<f32>(&bytes).unwrap(), m);
        assert!(decode_condensed::<f64>(&bytes).is_err());
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode_condensed(&model());
        bytes[40] ^= 1;
        let err = decode_condensed::<f32>(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
        assert!(decode_condensed::<f32>(&bytes[..20]).is_err());
    }

    #[test]
    fn means_round_trip() {
        let e = MeanEntry {
            dataset_hash: [7; 32],
            cfg_digest: [9; 32],
            seed: 42,
            counts: vec![3, 4],
            means: Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.0, 1e-7, 3.5]).unwrap(),
        };
        assert_eq!(decode_means(&encode_means(&e)).unwrap(), e);
    }

    #[test]
    fn adam_round_trip() {
        let mut opt = Adam::<f32>::new(&[&[2, 3], &[4]], vec![0.01, 0.1]).unwrap();
        opt.step = 17;
        opt.m[0].data_mut()[1] = 0.25;
        opt.v[1].data_mut()[3] = 4.0;
        assert_eq!(decode_adam::<f32>(&encode_adam(&opt)).unwrap(), opt);
    }

    #[test]
    fn ppm_round_trip_and_gray_replication() {
        let mut canvas = Rgb8::new(3, 2);
        let img = Tensor::<f32>::new(vec![1, 1, 2], vec![1.0, 0.2]).unwrap();
        canvas.paste(&img, 1, 1).unwrap();
        let decoded = decode_ppm(&canvas.encode_ppm()).unwrap();
        assert_eq!(decoded, canvas);
        assert_eq!(&decoded.pixels[12..18], &[255, 255, 255, 51, 51, 51]);
        assert!(canvas.paste(&img, 2, 1).is_err());
    }

    #[test]
    fn config_requires_schema_version() {
        #[derive(serde::Deserialize)]
        struct C {
            #[allow(dead_code)]
            schema_version: u32,
            x: u32,
        }
        let c: C = parse_config(r#"{"schema_version": 1, "x": 3}"#).unwrap();
        assert_eq!(c.x, 3);
        assert!(parse_config::<C>(r#"{"x": 3}"#).is_err());
        assert!(parse_config::<C>(r#"{"schema_version": 2, "x": 3}"#).is_err());
        assert!(parse_config::<C>("{").is_err());
    }
}
