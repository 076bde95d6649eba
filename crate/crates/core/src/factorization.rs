//! The factorized synthetic set: per-class latent codes, a bank of shared
//! decoders, and their cartesian product.
//!
//! Every synthetic image is addressed by a [`Triple`] `(class, code, decoder)`.
//! Code `m` of class `c` decoded by decoder `d` is labelled with the class row
//! `c`, whatever `m` and `d` are.

use serde::{Deserialize, Serialize};

use crate::nets::{Decoder, DecoderKind, DecoderSpec, Params};
use crate::rng;
use crate::tensor::{Gradients, Scalar, Tape, Tensor, TensorError, Var};
use crate::{Error, Result};

/// Per-class codes `[C, M, 12, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodebook<T: Scalar = f32> {
    codes: Tensor<T>,
    class_ids: Vec<u32>,
}

impl<T: Scalar> LatentCodebook<T> {
    pub fn new(codes: Tensor<T>, class_ids: Vec<u32>) -> Result<Self> {
        let s = codes.shape();
        if s.len() != 5 {
            return Err(Error::Invalid(format!("codes must be [C, M, ch, h, w], got {s:?}")));
        }
        if s[0] != class_ids.len() {
            return Err(Error::Invalid(format!(
                "{} code rows but {} class ids",
                s[0],
                class_ids.len()
            )));
        }
        if s[1] == 0 {
            return Err(Error::Invalid("at least one code per class is required".into()));
        }
        if !codes.is_finite() {
            return Err(Error::Invalid("codes must be finite".into()));
        }
        Ok(Self { codes, class_ids })
    }

    /// Codes drawn from `N(0, sigma^2)`.
    pub fn gaussian(classes: usize, per_class: usize, code_shape: [usize; 3], sigma: f64, seed: u64) -> Result<Self> {
        let mut rng = rng::stream("codebook.gaussian", seed);
        let [ch, h, w] = code_shape;
        let codes = Tensor::from_fn(&[classes, per_class, ch, h, w], |_| rng::normal(&mut rng, sigma));
        Self::new(codes, (0..classes as u32).collect())
    }

    pub fn num_classes(&self) -> usize {
        self.codes.shape()[0]
    }

    pub fn codes_per_class(&self) -> usize {
        self.codes.shape()[1]
    }

    pub fn code_shape(&self) -> [usize; 3] {
        let s = self.codes.shape();
        [s[2], s[3], s[4]]
    }

    pub fn code_numel(&self) -> usize {
        self.code_shape().iter().product()
    }

    pub fn codes(&self) -> &Tensor<T> {
        &self.codes
    }

    pub fn codes_mut(&mut self) -> &mut Tensor<T> {
        &mut self.codes
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    /// `[12, h, w]` code `m` of class row `c`.
    pub fn code(&self, c: usize, m: usize) -> Result<Tensor<T>> {
        check_index("class", c, self.num_classes())?;
        check_index("code", m, self.codes_per_class())?;
        let n = self.code_numel();
        let at = (c * self.codes_per_class() + m) * n;
        let [ch, h, w] = self.code_shape();
        Ok(Tensor::new(vec![ch, h, w], self.codes.data()[at..at + n].to_vec())?)
    }
}

fn check_index(what: &'static str, index: usize, extent: usize) -> Result<()> {
    if index >= extent {
        return Err(Error::Index { what, index, extent });
    }
    Ok(())
}

/// `D` independently parameterized decoders sharing one spec.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBank<T: Scalar = f32> {
    spec: DecoderSpec,
    decoders: Vec<Decoder<T>>,
}

impl<T: Scalar> DecoderBank<T> {
    pub fn new(decoders: Vec<Decoder<T>>) -> Result<Self> {
        let spec = *decoders
            .first()
            .ok_or_else(|| Error::Invalid("decoder bank needs at least one decoder".into()))?
            .spec();
        if decoders.iter().any(|d| *d.spec() != spec) {
            return Err(Error::Invalid("decoders in a bank must share one spec".into()));
        }
        Ok(Self { spec, decoders })
    }

    /// `count` decoders, decoder `d` initialized from `seed + d`.
    pub fn build(spec: &DecoderSpec, count: usize, seed: u64) -> Result<Self> {
        let decoders = (0..count as u64)
            .map(|d| Decoder::build(spec, seed.wrapping_add(d)))
            .collect::<Result<_>>()?;
        Self::new(decoders)
    }

    /// `count` copies of one decoder.
    pub fn replicate(decoder: &Decoder<T>, count: usize) -> Result<Self> {
        Self::new(vec![decoder.clone(); count])
    }

    pub fn spec(&self) -> &DecoderSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.decoders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decoders.is_empty()
    }

    pub fn decoders(&self) -> &[Decoder<T>] {
        &self.decoders
    }

    pub fn decoders_mut(&mut self) -> &mut [Decoder<T>] {
        &mut self.decoders
    }
}

/// Address of one synthetic image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub c: usize,
    pub m: usize,
    pub d: usize,
}

impl Triple {
    pub fn new(c: usize, m: usize, d: usize) -> Self {
        Self { c, m, d }
    }
}

/// Every `(c, m, d)` in lexicographic order.
pub fn all_triples(classes: usize, codes: usize, decoders: usize) -> Vec<Triple> {
    let mut out = Vec::with_capacity(classes * codes * decoders);
    for c in 0..classes {
        for m in 0..codes {
            for d in 0..decoders {
                out.push(Triple { c, m, d });
            }
        }
    }
    out
}

/// Labeled images produced by synthesis or by coreset selection.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset<T: Scalar = f32> {
    pub images: Tensor<T>,
    pub labels: Vec<u32>,
    pub num_classes: usize,
}

impl<T: Scalar> SyntheticDataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }
}

/// Tape handles for a model recorded with [`KfsModel::record`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub codes: Var,
    /// Codes reshaped to `[C * M, 12, h, w]`.
    pub flat_codes: Var,
    pub decoders: Vec<Vec<Var>>,
}

/// Codebook plus decoder bank: the learnable state of a condensed set.
#[derive(Debug, Clone, PartialEq)]
pub struct KfsModel<T: Scalar = f32> {
    pub codebook: LatentCodebook<T>,
    pub bank: DecoderBank<T>,
}

impl<T: Scalar> KfsModel<T> {
    pub fn new(codebook: LatentCodebook<T>, bank: DecoderBank<T>) -> Result<Self> {
        if codebook.code_shape() != bank.spec().code_shape {
            return Err(Error::Invalid(format!(
                "codebook code shape {:?} does not fit decoder code shape {:?}",
                codebook.code_shape(),
                bank.spec().code_shape
            )));
        }
        Ok(Self { codebook, bank })
    }

    pub fn num_classes(&self) -> usize {
        self.codebook.num_classes()
    }

    pub fn codes_per_class(&self) -> usize {
        self.codebook.codes_per_class()
    }

    pub fn num_decoders(&self) -> usize {
        self.bank.len()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.bank.spec().output_shape()
    }

    pub fn triples(&self) -> Vec<Triple> {
        all_triples(self.num_classes(), self.codes_per_class(), self.num_decoders())
    }

    pub fn check_triple(&self, t: Triple) -> Result<()> {
        check_index("class", t.c, self.num_classes())?;
        check_index("code", t.m, self.codes_per_class())?;
        check_index("decoder", t.d, self.num_decoders())
    }

    pub fn cast<U: Scalar>(&self) -> KfsModel<U> {
        let codebook = LatentCodebook {
            codes: self.codebook.codes.cast(),
            class_ids: self.codebook.class_ids.clone(),
        };
        let decoders = self
            .bank
            .decoders
            .iter()
            .map(|d| {
                let layers = d
                    .layers()
                    .iter()
                    .map(|l| crate::nets::ConvLayer {
                        weight: l.weight.cast(),
                        bias: l.bias.cast(),
                    })
                    .collect();
                Decoder::from_layers(d.spec(), layers).expect("same spec")
            })
            .collect();
        KfsModel {
            codebook,
            bank: DecoderBank {
                spec: self.bank.spec,
                decoders,
            },
        }
    }

    /// Records codes and decoder parameters as leaves.
    pub fn record(&self, tape: &mut Tape<T>, requires_grad: bool) -> Result<ModelVars, TensorError> {
        let codes = tape.leaf(self.codebook.codes.clone(), requires_grad);
        let [ch, h, w] = self.codebook.code_shape();
        let rows = self.num_classes() * self.codes_per_class();
        let flat_codes = tape.reshape(codes, &[rows, ch, h, w])?;
        let decoders = self
            .bank
            .decoders
            .iter()
            .map(|d| d.register(tape, requires_grad))
            .collect();
        Ok(ModelVars {
            codes,
            flat_codes,
            decoders,
        })
    }

    /// Decodes the given triples into `[k, C, H, W]`, rows in `triples` order.
    /// Each decoder runs once over all of its codes.
    pub fn render_on(&self, tape: &mut Tape<T>, vars: &ModelVars, triples: &[Triple]) -> Result<Var> {
        for &t in triples {
            self.check_triple(t)?;
        }
        let m = self.codes_per_class();
        let mut parts = Vec::new();
        let mut position = vec![0usize; triples.len()];
        let mut row = 0;
        for (d, decoder) in self.bank.decoders.iter().enumerate() {
            let members: Vec<usize> = (0..triples.len()).filter(|&i| triples[i].d == d).collect();
            if members.is_empty() {
                continue;
            }
            let code_rows: Vec<usize> = members.iter().map(|&i| triples[i].c * m + triples[i].m).collect();
            let sel = tape.select_rows(vars.flat_codes, &code_rows)?;
            parts.push(decoder.decode_on(tape, sel, &vars.decoders[d])?);
            for &i in &members {
                position[i] = row;
                row += 1;
            }
        }
        let stacked = tape.concat0(&parts)?;
        if position.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(stacked);
        }
        Ok(tape.select_rows(stacked, &position)?)
    }

    /// Image `f(theta_{c,m}; phi_d)` as `[C, H, W]`.
    pub fn synthesize(&self, c: usize, m: usize, d: usize) -> Result<Tensor<T>> {
        let t = Triple::new(c, m, d);
        self.check_triple(t)?;
        let code = self.codebook.code(c, m)?;
        let [ch, h, w] = self.codebook.code_shape();
        let batch = code.reshape(&[1, ch, h, w])?;
        let img = self.bank.decoders[d].decode(&batch)?;
        let [oc, oh, ow] = self.image_shape();
        Ok(img.reshape(&[oc, oh, ow])?)
    }

    /// Untracked render of `triples` into `[k, C, H, W]`.
    pub fn render(&self, triples: &[Triple]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.record(&mut tape, false)?;
        let out = self.render_on(&mut tape, &vars, triples)?;
        Ok(tape.value(out).clone())
    }

    /// All `C * M * D` images in `(c, m, d)` lexicographic order.
    pub fn synthesize_all(&self) -> Result<SyntheticDataset<T>> {
        let triples = self.triples();
        let images = self.render(&triples)?;
        let labels = triples.iter().map(|t| self.codebook.class_ids[t.c]).collect();
        let num_classes = self
            .codebook
            .class_ids
            .iter()
            .max()
            .map_or(0, |&m| m as usize + 1);
        Ok(SyntheticDataset {
            images,
            labels,
            num_classes,
        })
    }

    /// Gradient laid out like [`Params::params`] read back from `grads`.
    pub fn gradient_from(&self, vars: &ModelVars, grads: &Gradients<T>) -> KfsGradient<T> {
        let mut tensors = vec![grads.get(vars.codes).cloned().unwrap_or_else(|| Tensor::zeros(self.codebook.codes.shape()))];
        for (dv, dec) in vars.decoders.iter().zip(&self.bank.decoders) {
            for (&v, p) in dv.iter().zip(dec.params()) {
                tensors.push(grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())));
            }
        }
        KfsGradient {
            tensors,
            per_decoder: self.bank.spec.channel_path().len() * 2 - 2,
        }
    }

    pub fn zero_gradient(&self) -> KfsGradient<T> {
        KfsGradient {
            tensors: self.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
            per_decoder: self.bank.spec.channel_path().len() * 2 - 2,
        }
    }
}

impl<T: Scalar> Params<T> for KfsModel<T> {
    /// Codes first, then each decoder's `(weight, bias)` pairs in order.
    fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = vec![&self.codebook.codes];
        for d in &self.bank.decoders {
            p.extend(d.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = vec![&mut self.codebook.codes];
        for d in &mut self.bank.decoders {
            p.extend(d.params_mut());
        }
        p
    }
}

/// Gradient with respect to `(Theta, phi)` in the model's parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct KfsGradient<T: Scalar = f32> {
    pub tensors: Vec<Tensor<T>>,
    per_decoder: usize,
}

impl<T: Scalar> KfsGradient<T> {
    pub fn codes(&self) -> &Tensor<T> {
        &self.tensors[0]
    }

    pub fn decoder(&self, d: usize) -> &[Tensor<T>] {
        &self.tensors[1 + d * self.per_decoder..1 + (d + 1) * self.per_decoder]
    }

    pub fn num_decoders(&self) -> usize {
        (self.tensors.len() - 1) / self.per_decoder
    }

    pub fn add_assign(&mut self, other: &KfsGradient<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn sub(&self, other: &KfsGradient<T>) -> KfsGradient<T> {
        let mut out = self.clone();
        for (a, b) in out.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x -= y;
            }
        }
        out
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.scale_inplace(s);
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn norm(&self) -> T {
        self.tensors.iter().map(|t| t.dot(t)).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.tensors.iter().map(Tensor::max_abs).fold(T::zero(), T::max)
    }

    pub fn cast<U: Scalar>(&self) -> KfsGradient<U> {
        KfsGradient {
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            per_decoder: self.per_decoder,
        }
    }
}

/// Per-class parameter accounting against an images-per-class budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub per_class_code_params: f64,
    pub per_class_decoder_share: f64,
    pub total_per_class: f64,
    pub budget: f64,
    pub overparam_pct: f64,
}

impl BudgetReport {
    /// `total = M * numel(code) + D * decoder_params / C`, compared with
    /// `images_per_class * numel(image)`.
    pub fn compute(
        classes: usize,
        codes_per_class: usize,
        code_numel: usize,
        decoders: usize,
        decoder_params: usize,
        images_per_class: usize,
        image_numel: usize,
    ) -> Result<Self> {
        let budget = (images_per_class * image_numel) as f64;
        if budget <= 0.0 {
            return Err(Error::Config("budget must be positive".into()));
        }
        if classes == 0 {
            return Err(Error::Config("budget needs at least one class".into()));
        }
        let codes = (codes_per_class * code_numel) as f64;
        let share = (decoders * decoder_params) as f64 / classes as f64;
        let total = codes + share;
        Ok(Self {
            per_class_code_params: codes,
            per_class_decoder_share: share,
            total_per_class: total,
            budget,
            overparam_pct: (total - budget) / budget * 100.0,
        })
    }
}

pub fn budget_report<T: Scalar>(
    codebook: &LatentCodebook<T>,
    bank: &DecoderBank<T>,
    images_per_class: usize,
    image_shape: [usize; 3],
) -> Result<BudgetReport> {
    BudgetReport::compute(
        codebook.num_classes(),
        codebook.codes_per_class(),
        codebook.code_numel(),
        bank.len(),
        bank.spec().param_count(),
        images_per_class,
        image_shape.iter().product(),
    )
}

/// One published hyperparameter row with its stated over-parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PublishedSetting {
    pub dataset: &'static str,
    pub classes: usize,
    pub images_per_class: usize,
    pub image_shape: [usize; 3],
    pub code_shape: [usize; 3],
    pub codes_per_class: usize,
    pub decoder: DecoderKind,
    pub decoders: usize,
    pub stated_overparam_pct: f64,
}

impl PublishedSetting {
    pub fn report(&self) -> Result<BudgetReport> {
        let spec = DecoderSpec::new(self.decoder, self.code_shape, self.image_shape[0])?;
        BudgetReport::compute(
            self.classes,
            self.codes_per_class,
            self.code_shape.iter().product(),
            self.decoders,
            spec.param_count(),
            self.images_per_class,
            self.image_shape.iter().product(),
        )
    }

    /// Whether the formula reproduces the stated value to two decimals.
    pub fn consistent(&self) -> Result<bool> {
        Ok((self.report()?.overparam_pct - self.stated_overparam_pct).abs() <= 0.01)
    }
}

/// The published per-setting code/decoder configurations.
pub fn published_settings() -> Vec<PublishedSetting> {
    use DecoderKind::{HighR, LowR};
    let row = |dataset, classes, ipc, side, code: [usize; 3], codes, decoder, decoders, pct| PublishedSetting {
        dataset,
        classes,
        images_per_class: ipc,
        image_shape: [3, side, side],
        code_shape: code,
        codes_per_class: codes,
        decoder,
        decoders,
        stated_overparam_pct: pct,
    };
    vec![
        row("SVHN", 10, 1, 32, [12, 4, 4], 13, LowR, 8, 0.47),
        row("SVHN", 10, 10, 32, [12, 4, 4], 160, LowR, 12, 2.88),
        row("SVHN", 10, 50, 32, [12, 8, 8], 200, HighR, 16, 0.88),
        row("CIFAR10", 10, 1, 32, [12, 4, 4], 13, LowR, 8, 0.47),
        row("CIFAR10", 10, 10, 32, [12, 4, 4], 160, LowR, 12, 2.88),
        row("CIFAR10", 10, 50, 32, [12, 8, 8], 200, HighR, 16, 0.88),
        row("CIFAR100", 100, 1, 32, [12, 4, 4], 16, LowR, 8, 1.92),
        row("CIFAR100", 100, 10, 32, [12, 4, 4], 160, LowR, 12, 0.29),
        row("TinyImageNet", 200, 1, 64, [12, 8, 8], 16, LowR, 8, 0.24),
        row("TinyImageNet", 200, 10, 64, [12, 16, 16], 64, HighR, 16, 0.04),
    ]
}
