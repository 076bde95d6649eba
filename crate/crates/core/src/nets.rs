//! Network definitions: the frozen random feature extractor, the Low-R and
//! High-R decoders, the mirrored pretraining encoder and the evaluation
//! classifier.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng::{self, StreamRng};
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};
use crate::{Error, Result};

/// A conv or transposed-conv layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvLayer<T> {
    fn kaiming_normal(rng: &mut StreamRng, out_ch: usize, in_ch: usize, k: usize) -> Self {
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        let weight = Tensor::from_fn(&[out_ch, in_ch, k, k], |_| rng::normal(rng, std));
        Self {
            weight,
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    /// Uniform `±1/sqrt(fan_in)` for weight and bias, `fan_in = shape[1] * k * k`.
    fn uniform_default(rng: &mut StreamRng, shape: [usize; 4], bias_len: usize) -> Self {
        let bound = 1.0 / ((shape[1] * shape[2] * shape[3]) as f64).sqrt();
        let weight = Tensor::from_fn(&shape, |_| rng::uniform(rng, bound));
        let bias = Tensor::from_fn(&[bias_len], |_| rng::uniform(rng, bound));
        Self { weight, bias }
    }

    pub fn num_params(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// Parameter access shared by every network.
pub trait Params<T: Scalar> {
    fn params(&self) -> Vec<&Tensor<T>>;

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Records every parameter on `tape` in `params()` order.
    fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| tape.leaf(p.clone(), requires_grad))
            .collect()
    }
}

fn layer_params<T: Scalar>(layers: &[ConvLayer<T>]) -> Vec<&Tensor<T>> {
    layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
}

fn layer_params_mut<T: Scalar>(layers: &mut [ConvLayer<T>]) -> Vec<&mut Tensor<T>> {
    layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
}

/// Geometry and seed of a ConvNet-style embedder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureNetConfig {
    /// `[C, H, W]` of the input images.
    pub input_shape: [usize; 3],
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_width() -> usize {
    64
}

fn default_depth() -> usize {
    3
}

impl FeatureNetConfig {
    pub fn new(input_shape: [usize; 3], width: usize, depth: usize, init_seed: u64) -> Self {
        Self {
            input_shape,
            width,
            depth,
            init_seed,
        }
    }

    pub fn with_seed(&self, init_seed: u64) -> Self {
        Self {
            init_seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_shape;
        if c == 0 || self.width == 0 || self.depth == 0 {
            return Err(Error::Config(format!(
                "feature net needs positive channels, width and depth, got {c}, {}, {}",
                self.width, self.depth
            )));
        }
        let div = 1usize << self.depth;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by 2^{} = {div}",
                self.depth
            )));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        let [_, h, w] = self.input_shape;
        self.width * (h >> self.depth) * (w >> self.depth)
    }

    /// Digest of the architecture, excluding the seed.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"kfs.feature_net.v1\0");
        for v in self.input_shape.iter().chain([&self.width, &self.depth]) {
            h.update((*v as u64).to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Block stack `[conv3x3, instance_norm, relu, avg_pool2x2] * depth` then flatten.
fn convnet_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, blocks: &[Var]) -> Result<Var, TensorError> {
    let mut h = x;
    for pair in blocks.chunks(2) {
        h = tape.conv2d(h, pair[0], pair[1], 1, 1)?;
        h = tape.instance_norm(h)?;
        h = tape.relu(h);
        h = tape.avg_pool2d(h)?;
    }
    tape.flatten(h)
}

fn convnet_blocks<T: Scalar>(rng: &mut StreamRng, cfg: &FeatureNetConfig) -> Vec<ConvLayer<T>> {
    let mut in_ch = cfg.input_shape[0];
    (0..cfg.depth)
        .map(|_| {
            let layer = ConvLayer::kaiming_normal(rng, cfg.width, in_ch, 3);
            in_ch = cfg.width;
            layer
        })
        .collect()
}

/// Randomly initialized, never trained embedder `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNet<T: Scalar = f32> {
    cfg: FeatureNetConfig,
    blocks: Vec<ConvLayer<T>>,
}

/// Images embedded per temporary tape in [`FeatureNet::embed`].
const EMBED_BATCH: usize = 64;

impl<T: Scalar> FeatureNet<T> {
    /// Kaiming-normal conv weights and zero biases drawn from `cfg.init_seed`.
    pub fn build(cfg: &FeatureNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream("feature_net", cfg.init_seed);
        Ok(Self {
            cfg: cfg.clone(),
            blocks: convnet_blocks(&mut rng, cfg),
        })
    }

    pub fn config(&self) -> &FeatureNetConfig {
        &self.cfg
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.embed_dim()
    }

    pub fn layers(&self) -> &[ConvLayer<T>] {
        &self.blocks
    }

    /// Embeds `x [N, C, H, W]` recorded on `tape`; weights enter as constants.
    pub fn embed_on(&self, tape: &mut Tape<T>, x: Var) -> Result<Var, TensorError> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1..] != self.cfg.input_shape[..] {
            return Err(crate::tensor::mismatch(
                "feature_net",
                "input shape",
                self.cfg.input_shape,
                shape,
            ));
        }
        let vars = self.register(tape, false);
        convnet_forward(tape, x, &vars)
    }

    /// Untracked embedding of `x [N, C, H, W]` into `[N, E]`.
    pub fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let n = x.shape().first().copied().unwrap_or(0);
        let inner: usize = x.shape().iter().skip(1).product();
        let e = self.embed_dim();
        let mut out = Vec::with_capacity(n * e);
        for start in (0..n).step_by(EMBED_BATCH) {
            let rows = EMBED_BATCH.min(n - start);
            let mut shape = x.shape().to_vec();
            shape[0] = rows;
            let chunk = Tensor::new(shape, x.data()[start * inner..(start + rows) * inner].to_vec())?;
            let mut tape = Tape::new();
            let xv = tape.constant(chunk);
            let y = self.embed_on(&mut tape, xv)?;
            out.extend_from_slice(tape.value(y).data());
        }
        Tensor::new(vec![n, e], out)
    }
}

impl<T: Scalar> Params<T> for FeatureNet<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        layer_params(&self.blocks)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        layer_params_mut(&mut self.blocks)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecoderKind {
    /// Three 2x2/stride-2 transposed convs, 8x upsampling, channels 12 -> 9 -> 6 -> out.
    LowR,
    /// Two 2x2/stride-2 transposed convs, 4x upsampling, channels 12 -> 6 -> out.
    HighR,
}

impl DecoderKind {
    pub fn upscale(self) -> usize {
        match self {
            DecoderKind::LowR => 8,
            DecoderKind::HighR => 4,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            DecoderKind::LowR => 0,
            DecoderKind::HighR => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DecoderKind::LowR),
            1 => Some(DecoderKind::HighR),
            _ => None,
        }
    }
}

pub const CODE_CHANNELS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub kind: DecoderKind,
    /// `[12, h, w]`.
    pub code_shape: [usize; 3],
    #[serde(default = "default_out_channels")]
    pub out_channels: usize,
}

fn default_out_channels() -> usize {
    3
}

impl DecoderSpec {
    pub fn new(kind: DecoderKind, code_shape: [usize; 3], out_channels: usize) -> Result<Self> {
        let spec = Self {
            kind,
            code_shape,
            out_channels,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Spec whose output matches `image_shape = [C, H, W]`.
    pub fn for_image(kind: DecoderKind, image_shape: [usize; 3]) -> Result<Self> {
        let [c, h, w] = image_shape;
        let up = kind.upscale();
        if h % up != 0 || w % up != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "{kind:?} decoder needs image sides divisible by {up}, got {h}x{w}"
            )));
        }
        Self::new(kind, [CODE_CHANNELS, h / up, w / up], c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.code_shape[0] != CODE_CHANNELS {
            return Err(Error::Config(format!(
                "decoder codes need {CODE_CHANNELS} channels, got {}",
                self.code_shape[0]
            )));
        }
        if self.code_shape[1] == 0 || self.code_shape[2] == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!(
                "degenerate decoder spec: code {:?}, {} output channels",
                self.code_shape, self.out_channels
            )));
        }
        Ok(())
    }

    pub fn channel_path(&self) -> Vec<usize> {
        match self.kind {
            DecoderKind::LowR => vec![CODE_CHANNELS, 9, 6, self.out_channels],
            DecoderKind::HighR => vec![CODE_CHANNELS, 6, self.out_channels],
        }
    }

    pub fn output_shape(&self) -> [usize; 3] {
        let up = self.kind.upscale();
        [self.out_channels, self.code_shape[1] * up, self.code_shape[2] * up]
    }

    pub fn code_numel(&self) -> usize {
        self.code_shape.iter().product()
    }

    pub fn param_count(&self) -> usize {
        param_count(self)
    }
}

/// `sum over layers of Cin * Cout * 2 * 2 + Cout`.
pub fn param_count(spec: &DecoderSpec) -> usize {
    spec.channel_path()
        .windows(2)
        .map(|io| io[0] * io[1] * 4 + io[1])
        .sum()
}

/// Tiny transposed-conv decoder ending in a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T: Scalar = f32> {
    spec: DecoderSpec,
    layers: Vec<ConvLayer<T>>,
}

impl<T: Scalar> Decoder<T> {
    pub fn build(spec: &DecoderSpec, init_seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream("decoder", init_seed);
        let layers = spec
            .channel_path()
            .windows(2)
            .map(|io| ConvLayer::uniform_default(&mut rng, [io[0], io[1], 2, 2], io[1]))
            .collect();
        Ok(Self { spec: *spec, layers })
    }

    pub fn zeros(spec: &DecoderSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .channel_path()
            .windows(2)
            .map(|io| ConvLayer {
                weight: Tensor::zeros(&[io[0], io[1], 2, 2]),
                bias: Tensor::zeros(&[io[1]]),
            })
            .collect();
        Ok(Self { spec: *spec, layers })
    }

    pub fn from_layers(spec: &DecoderSpec, layers: Vec<ConvLayer<T>>) -> Result<Self> {
        let template = Self::zeros(spec)?;
        if layers.len() != template.layers.len()
            || layers
                .iter()
                .zip(&template.layers)
                .any(|(a, b)| a.weight.shape() != b.weight.shape() || a.bias.shape() != b.bias.shape())
        {
            return Err(Error::Invalid("decoder layers do not match spec".into()));
        }
        Ok(Self { spec: *spec, layers })
    }

    pub fn spec(&self) -> &DecoderSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[ConvLayer<T>] {
        &self.layers
    }

    /// Decodes `codes [B, 12, h, w]` with parameters previously registered
    /// on the same tape.
    pub fn decode_on(&self, tape: &mut Tape<T>, codes: Var, params: &[Var]) -> Result<Var, TensorError> {
        let shape = tape.shape(codes);
        if shape.len() != 4 || shape[1..] != self.spec.code_shape[..] {
            return Err(crate::tensor::mismatch("decoder", "code shape", self.spec.code_shape, shape));
        }
        let mut h = codes;
        for pair in params.chunks(2) {
            h = tape.conv_transpose2d(h, pair[0], pair[1], 2)?;
        }
        Ok(tape.sigmoid(h))
    }

    /// Untracked decode of `codes [B, 12, h, w]`.
    pub fn decode(&self, codes: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mut tape = Tape::new();
        let x = tape.constant(codes.clone());
        let params = self.register(&mut tape, false);
        let y = self.decode_on(&mut tape, x, &params)?;
        Ok(tape.value(y).clone())
    }
}

impl<T: Scalar> Params<T> for Decoder<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        layer_params(&self.layers)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        layer_params_mut(&mut self.layers)
    }
}

/// Mirror of a decoder used only during pretraining: 2x2/stride-2 convs
/// walking the decoder's channel path backwards, no activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T: Scalar = f32> {
    spec: DecoderSpec,
    layers: Vec<ConvLayer<T>>,
}

impl<T: Scalar> Encoder<T> {
    pub fn build(spec: &DecoderSpec, init_seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream("encoder", init_seed);
        let mut path = spec.channel_path();
        path.reverse();
        let layers = path
            .windows(2)
            .map(|io| ConvLayer::uniform_default(&mut rng, [io[1], io[0], 2, 2], io[1]))
            .collect();
        Ok(Self { spec: *spec, layers })
    }

    pub fn encode_on(&self, tape: &mut Tape<T>, images: Var, params: &[Var]) -> Result<Var, TensorError> {
        let mut h = images;
        for pair in params.chunks(2) {
            h = tape.conv2d(h, pair[0], pair[1], 2, 0)?;
        }
        Ok(h)
    }

    /// Untracked encode of `images [B, C, H, W]` into `[B, 12, h, w]`.
    pub fn encode(&self, images: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let params = self.register(&mut tape, false);
        let y = self.encode_on(&mut tape, x, &params)?;
        Ok(tape.value(y).clone())
    }

    pub fn spec(&self) -> &DecoderSpec {
        &self.spec
    }
}

impl<T: Scalar> Params<T> for Encoder<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        layer_params(&self.layers)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        layer_params_mut(&mut self.layers)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub backbone: FeatureNetConfig,
    pub num_classes: usize,
}

/// ConvNet-3 backbone plus a linear head; trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T: Scalar = f32> {
    cfg: ClassifierConfig,
    blocks: Vec<ConvLayer<T>>,
    head_w: Tensor<T>,
    head_b: Tensor<T>,
}

impl<T: Scalar> Classifier<T> {
    pub fn build(cfg: &ClassifierConfig) -> Result<Self> {
        cfg.backbone.validate()?;
        if cfg.num_classes == 0 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        let mut rng = rng::stream("classifier", cfg.backbone.init_seed);
        let blocks = convnet_blocks(&mut rng, &cfg.backbone);
        let f = cfg.backbone.embed_dim();
        let bound = 1.0 / (f as f64).sqrt();
        let head_w = Tensor::from_fn(&[cfg.num_classes, f], |_| rng::uniform(&mut rng, bound));
        let head_b = Tensor::from_fn(&[cfg.num_classes], |_| rng::uniform(&mut rng, bound));
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.cfg
    }

    pub fn logits_on(&self, tape: &mut Tape<T>, x: Var, params: &[Var]) -> Result<Var, TensorError> {
        let (blocks, head) = params.split_at(params.len() - 2);
        let feats = convnet_forward(tape, x, blocks)?;
        tape.linear(feats, head[0], head[1])
    }

    /// Untracked logits `[N, classes]`.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let params = self.register(&mut tape, false);
        let y = self.logits_on(&mut tape, xv, &params)?;
        Ok(tape.value(y).clone())
    }

    /// Arg-max class per row.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>, TensorError> {
        let logits = self.logits(x)?;
        let k = self.cfg.num_classes;
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }
}

impl<T: Scalar> Params<T> for Classifier<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = layer_params(&self.blocks);
        p.push(&self.head_w);
        p.push(&self.head_b);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = layer_params_mut(&mut self.blocks);
        p.push(&mut self.head_w);
        p.push(&mut self.head_b);
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn low_r(out: usize) -> DecoderSpec {
        DecoderSpec::new(DecoderKind::LowR, [12, 4, 4], out).unwrap()
    }

    #[test]
    fn decoder_parameter_counts() {
        assert_eq!(param_count(&low_r(3)), 738);
        assert_eq!(param_count(&DecoderSpec::new(DecoderKind::HighR, [12, 8, 8], 3).unwrap()), 369);
        assert_eq!(param_count(&low_r(1)), 441 + 222 + 25);
        let d: Decoder<f32> = Decoder::build(&low_r(3), 0).unwrap();
        assert_eq!(d.num_params(), 738);
    }

    #[test]
    fn decoder_output_shapes() {
        let d: Decoder<f32> = Decoder::build(&low_r(3), 1).unwrap();
        let y = d.decode(&Tensor::full(&[2, 12, 4, 4], 0.3)).unwrap();
        assert_eq!(y.shape(), &[2, 3, 32, 32]);
        let hs = DecoderSpec::new(DecoderKind::HighR, [12, 8, 8], 3).unwrap();
        let d: Decoder<f32> = Decoder::build(&hs, 1).unwrap();
        assert_eq!(d.decode(&Tensor::zeros(&[1, 12, 8, 8])).unwrap().shape(), &[1, 3, 32, 32]);
        assert_eq!(hs.output_shape(), [3, 32, 32]);
    }

    #[test]
    fn zero_decoder_is_half_grey() {
        let d: Decoder<f64> = Decoder::zeros(&low_r(3)).unwrap();
        let y = d.decode(&Tensor::zeros(&[1, 12, 4, 4])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn decoder_rejects_wrong_code_channels() {
        assert!(DecoderSpec::new(DecoderKind::LowR, [8, 4, 4], 3).is_err());
        let d: Decoder<f32> = Decoder::build(&low_r(3), 0).unwrap();
        assert!(d.decode(&Tensor::zeros(&[1, 12, 2, 2])).is_err());
    }

    #[test]
    fn feature_net_embedding_dim_and_determinism() {
        let cfg = FeatureNetConfig::new([3, 32, 32], 64, 3, 5);
        assert_eq!(cfg.embed_dim(), 1024);
        let g1: FeatureNet<f32> = FeatureNet::build(&cfg).unwrap();
        let g2: FeatureNet<f32> = FeatureNet::build(&cfg).unwrap();
        assert_eq!(g1, g2);
        let x = Tensor::from_fn(&[2, 3, 32, 32], |i| ((i % 17) as f32) / 17.0);
        let e1 = g1.embed(&x).unwrap();
        assert_eq!(e1.shape(), &[2, 1024]);
        assert_eq!(e1, g2.embed(&x).unwrap());
        let g3: FeatureNet<f32> = FeatureNet::build(&cfg.with_seed(6)).unwrap();
        let e3 = g3.embed(&x).unwrap();
        let diff: f32 = e1.data().iter().zip(e3.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn feature_net_rejects_indivisible_input() {
        let cfg = FeatureNetConfig::new([3, 20, 20], 8, 3, 0);
        assert!(FeatureNet::<f32>::build(&cfg).is_err());
    }

    #[test]
    fn encoder_mirrors_decoder() {
        let spec = low_r(3);
        let e: Encoder<f32> = Encoder::build(&spec, 0).unwrap();
        assert_eq!(e.num_params(), 3 * 6 * 4 + 6 + 6 * 9 * 4 + 9 + 9 * 12 * 4 + 12);
        let z = e.encode(&Tensor::zeros(&[2, 3, 32, 32])).unwrap();
        assert_eq!(z.shape(), &[2, 12, 4, 4]);
    }
}
