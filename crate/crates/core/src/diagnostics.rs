//! Bias and variance of single-sample gradient estimators, in closed form and
//! by exhaustive enumeration of the sampler's outcomes.
//!
//! Two estimators are studied:
//!
//! - *synthetic pair*: one `(m, d)` is drawn and every class matches its real
//!   mean against the single embedding `g(f(theta_{c,m}; phi_d))`. This is
//!   biased; the bias is the gradient of
//!   `(1/C) sum_c 0.5 * (mean_t ||g_t||^2 - ||mean_t g_t||^2)`.
//! - *real index*: one real example is drawn per class, independently, and
//!   matched against the full synthetic mean. This is unbiased with covariance
//!   `(1/C^2) sum_c J_c^T Cov_n(g(x_{c,n})) J_c`, `J_c` the Jacobian of the
//!   synthetic class mean.
//!
//! Everything here runs in f64.

use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::factorization::{DecoderBank, KfsGradient, KfsModel, LatentCodebook, ModelVars, Triple};
use crate::matching::{self, embed_triples_on, full_selection, Objective};
use crate::nets::{DecoderKind, DecoderSpec, FeatureNet, FeatureNetConfig, Params};
use crate::rng;
use crate::tensor::gradcheck::{self, NamedCheck};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::{Error, Result};
use rand::Rng;

/// Real embeddings grouped by class.
#[derive(Debug, Clone, PartialEq)]
pub struct RealEmbeddings {
    /// `per_class[c]` is `[N_c, E]`.
    pub per_class: Vec<Tensor<f64>>,
    /// `[C, E]`.
    pub means: Tensor<f64>,
}

impl RealEmbeddings {
    /// Embeds `images[c] [N_c, C, H, W]` for every class.
    pub fn compute(net: &FeatureNet<f64>, norm: &Normalization, images: &[Tensor<f64>]) -> Result<Self> {
        let e = net.embed_dim();
        let mut per_class = Vec::with_capacity(images.len());
        let mut means = Vec::with_capacity(images.len() * e);
        for (c, x) in images.iter().enumerate() {
            if x.shape().first().copied().unwrap_or(0) == 0 {
                return Err(Error::Invalid(format!("class {c} has no real examples")));
            }
            let emb = net.embed(&norm.apply(x)?)?;
            let n = emb.shape()[0];
            let mut acc = vec![0.0; e];
            for row in emb.data().chunks(e) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            means.extend(acc.iter().map(|a| a / n as f64));
            per_class.push(emb);
        }
        let means = Tensor::new(vec![images.len(), e], means)?;
        Ok(Self { per_class, means })
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        self.per_class.iter().map(|t| t.shape()[0]).collect()
    }

    fn row(&self, c: usize, n: usize) -> &[f64] {
        let e = self.means.shape()[1];
        &self.per_class[c].data()[n * e..(n + 1) * e]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubsampleMode {
    SyntheticPair,
    RealIndex,
}

/// Uniform single-sample index sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsampleScheme {
    pub mode: SubsampleMode,
    pub seed: u64,
}

/// One outcome of a [`SubsampleScheme`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Draw {
    Pair { m: usize, d: usize },
    Real(Vec<usize>),
}

impl SubsampleScheme {
    /// Draw number `step` of this scheme.
    pub fn draw(&self, step: u64, codes: usize, decoders: usize, class_sizes: &[usize]) -> Result<Draw> {
        let mut r = rng::stream("subsample", self.seed ^ step.rotate_left(32));
        match self.mode {
            SubsampleMode::SyntheticPair => {
                if codes == 0 || decoders == 0 {
                    return Err(Error::Invalid("no synthetic pairs to sample".into()));
                }
                Ok(Draw::Pair {
                    m: r.random_range(0..codes),
                    d: r.random_range(0..decoders),
                })
            }
            SubsampleMode::RealIndex => class_sizes
                .iter()
                .enumerate()
                .map(|(c, &n)| {
                    if n == 0 {
                        Err(Error::Invalid(format!("class {c} has no real examples")))
                    } else {
                        Ok(r.random_range(0..n))
                    }
                })
                .collect::<Result<_>>()
                .map(Draw::Real),
        }
    }
}

/// Gradient of the single-sample loss selected by `draw`.
pub fn subsampled_gradient(
    draw: &Draw,
    real: &RealEmbeddings,
    model: &KfsModel<f64>,
    net: &FeatureNet<f64>,
    norm: &Normalization,
) -> Result<(f64, KfsGradient<f64>)> {
    let obj = Objective {
        net,
        norm,
        targets: &real.means,
    };
    match draw {
        Draw::Pair { m, d } => {
            let selection: Vec<Vec<Triple>> = (0..model.num_classes()).map(|c| vec![Triple::new(c, *m, *d)]).collect();
            for s in &selection {
                model.check_triple(s[0])?;
            }
            matching::selection_gradient(model, &obj, &real.means, &selection)
        }
        Draw::Real(idx) => {
            if idx.len() != model.num_classes() {
                return Err(Error::Invalid(format!("{} indices for {} classes", idx.len(), model.num_classes())));
            }
            let sizes = real.class_sizes();
            let mut targets = Vec::new();
            for (c, &n) in idx.iter().enumerate() {
                if n >= sizes[c] {
                    return Err(Error::Index {
                        what: "real example",
                        index: n,
                        extent: sizes[c],
                    });
                }
                targets.extend_from_slice(real.row(c, n));
            }
            let targets = Tensor::new(real.means.shape().to_vec(), targets)?;
            matching::selection_gradient(model, &obj, &targets, &full_selection(model))
        }
    }
}

/// Mean and covariance of a gradient estimator over a finite outcome set.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMoments {
    pub mean: Vec<f64>,
    /// Diagonal of the covariance.
    pub variance: Vec<f64>,
    /// Row-major covariance, when requested.
    pub covariance: Option<Vec<f64>>,
    pub count: usize,
}

impl GradientMoments {
    pub fn trace(&self) -> f64 {
        self.variance.iter().sum()
    }

    /// Population moments of equally weighted `samples`.
    pub fn from_samples(samples: &[Vec<f64>], full: bool) -> Self {
        let k = samples.len();
        let p = samples.first().map_or(0, Vec::len);
        let mut mean = vec![0.0; p];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= k as f64;
        }
        let centered: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| s.iter().zip(&mean).map(|(v, m)| v - m).collect())
            .collect();
        let mut variance = vec![0.0; p];
        for s in &centered {
            for (v, x) in variance.iter_mut().zip(s) {
                *v += x * x;
            }
        }
        for v in &mut variance {
            *v /= k as f64;
        }
        let covariance = full.then(|| {
            let mut cov = vec![0.0; p * p];
            for s in &centered {
                for (i, &a) in s.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    for (c, &b) in cov[i * p..(i + 1) * p].iter_mut().zip(s) {
                        *c += a * b;
                    }
                }
            }
            for c in &mut cov {
                *c /= k as f64;
            }
            cov
        });
        Self {
            mean,
            variance,
            covariance,
            count: k,
        }
    }
}

/// Moments of the synthetic-pair estimator over all `M * D` pairs.
pub fn exhaustive_pair_moments(
    real: &RealEmbeddings,
    model: &KfsModel<f64>,
    net: &FeatureNet<f64>,
    norm: &Normalization,
) -> Result<GradientMoments> {
    let mut samples = Vec::new();
    for m in 0..model.codes_per_class() {
        for d in 0..model.num_decoders() {
            let (_, g) = subsampled_gradient(&Draw::Pair { m, d }, real, model, net, norm)?;
            samples.push(g.flatten());
        }
    }
    Ok(GradientMoments::from_samples(&samples, false))
}

/// Number of joint real-index outcomes, or an error above `limit`.
fn joint_outcomes(sizes: &[usize], limit: usize) -> Result<usize> {
    sizes
        .iter()
        .try_fold(1usize, |a, &n| a.checked_mul(n))
        .filter(|&k| k <= limit)
        .ok_or_else(|| Error::Config(format!("more than {limit} joint real-index outcomes")))
}

/// Moments of the real-index estimator over every joint draw (the product
/// of the per-class index ranges).
pub fn exhaustive_real_moments(
    real: &RealEmbeddings,
    model: &KfsModel<f64>,
    net: &FeatureNet<f64>,
    norm: &Normalization,
    full_covariance: bool,
) -> Result<GradientMoments> {
    let sizes = real.class_sizes();
    let total = joint_outcomes(&sizes, 1 << 16)?;
    let mut samples = Vec::with_capacity(total);
    let mut idx = vec![0usize; sizes.len()];
    for _ in 0..total {
        let (_, g) = subsampled_gradient(&Draw::Real(idx.clone()), real, model, net, norm)?;
        samples.push(g.flatten());
        for (i, n) in idx.iter_mut().zip(&sizes).rev() {
            *i += 1;
            if *i < *n {
                break;
            }
            *i = 0;
        }
    }
    Ok(GradientMoments::from_samples(&samples, full_covariance))
}

/// Autodiff of `(1/C) sum_c 0.5 * (mean_t ||g_t||^2 - ||mean_t g_t||^2)`.
pub fn bias_closed_form(model: &KfsModel<f64>, net: &FeatureNet<f64>, norm: &Normalization) -> Result<KfsGradient<f64>> {
    let mut tape = Tape::new();
    let vars = model.record(&mut tape, true)?;
    let triples = model.triples();
    let emb = embed_triples_on(&mut tape, model, &vars, net, norm, &triples)?;
    let per_class = model.codes_per_class() * model.num_decoders();
    let c = model.num_classes();
    let mut terms = Vec::with_capacity(c);
    for class in 0..c {
        let rows: Vec<usize> = (class * per_class..(class + 1) * per_class).collect();
        let sel = tape.select_rows(emb, &rows)?;
        let sq = tape.dot(sel, sel)?;
        let own = tape.scale(sq, 1.0 / per_class as f64);
        let mean = tape.row_mean(emb, &rows)?;
        let cross = tape.dot(mean, mean)?;
        terms.push(tape.sub(own, cross)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let loss = tape.scale(total, 0.5 / c as f64);
    let grads = tape.backward(loss)?;
    Ok(model.gradient_from(&vars, &grads))
}

/// Jacobians `J_c [E, P]` of the synthetic class means, one row per
/// embedding coordinate.
pub fn mean_jacobians(model: &KfsModel<f64>, net: &FeatureNet<f64>, norm: &Normalization) -> Result<Vec<Vec<f64>>> {
    let e = net.embed_dim();
    let per_class = model.codes_per_class() * model.num_decoders();
    let triples = model.triples();
    let mut out = Vec::with_capacity(model.num_classes());
    for class in 0..model.num_classes() {
        let members = &triples[class * per_class..(class + 1) * per_class];
        let mut rows = Vec::new();
        for k in 0..e {
            let mut tape = Tape::new();
            let vars = model.record(&mut tape, true)?;
            let emb = embed_triples_on(&mut tape, model, &vars, net, norm, members)?;
            let all: Vec<usize> = (0..per_class).collect();
            let mean = tape.row_mean(emb, &all)?;
            let basis = tape.constant(Tensor::from_fn(&[e], |i| if i == k { 1.0 } else { 0.0 }));
            let coord = tape.dot(mean, basis)?;
            let grads = tape.backward(coord)?;
            rows.extend(model.gradient_from(&vars, &grads).flatten());
        }
        out.push(rows);
    }
    Ok(out)
}

/// Population covariance `[E, E]` of one class's real embeddings.
fn class_covariance(emb: &Tensor<f64>) -> Vec<f64> {
    let (n, e) = (emb.shape()[0], emb.shape()[1]);
    let mut mean = vec![0.0; e];
    for row in emb.data().chunks(e) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut cov = vec![0.0; e * e];
    for row in emb.data().chunks(e) {
        for i in 0..e {
            for j in 0..e {
                cov[i * e + j] += row[i] * row[j] / n as f64;
            }
        }
    }
    for i in 0..e {
        for j in 0..e {
            cov[i * e + j] -= mean[i] * mean[j];
        }
    }
    cov
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceOutput {
    Trace,
    /// Full `P x P` matrix, refused above `max_params`.
    Matrix { max_params: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    pub trace: f64,
    pub diagonal: Vec<f64>,
    pub matrix: Option<Vec<f64>>,
}

/// Default ceiling on the parameter count for full covariance matrices.
pub const FULL_MATRIX_MAX_PARAMS: usize = 5000;

/// `(1/C^2) sum_c J_c^T Cov_n(g(x_{c,n})) J_c`.
pub fn variance_closed_form(
    real: &RealEmbeddings,
    model: &KfsModel<f64>,
    net: &FeatureNet<f64>,
    norm: &Normalization,
    output: VarianceOutput,
) -> Result<VarianceReport> {
    let p = model.num_params();
    if let VarianceOutput::Matrix { max_params } = output {
        if p > max_params {
            return Err(Error::Config(format!(
                "full covariance for {p} parameters exceeds the limit of {max_params}"
            )));
        }
    }
    let e = net.embed_dim();
    let jac = mean_jacobians(model, net, norm)?;
    let c = model.num_classes() as f64;
    let mut diagonal = vec![0.0; p];
    let mut matrix = matches!(output, VarianceOutput::Matrix { .. }).then(|| vec![0.0; p * p]);
    for (class, j) in jac.iter().enumerate() {
        let cov = class_covariance(&real.per_class[class]);
        // K = Cov J, [E, P]
        let mut k = vec![0.0; e * p];
        for a in 0..e {
            for b in 0..e {
                let s = cov[a * e + b];
                if s == 0.0 {
                    continue;
                }
                for (kv, jv) in k[a * p..(a + 1) * p].iter_mut().zip(&j[b * p..(b + 1) * p]) {
                    *kv += s * jv;
                }
            }
        }
        for a in 0..e {
            for q in 0..p {
                diagonal[q] += j[a * p + q] * k[a * p + q] / (c * c);
            }
        }
        if let Some(m) = matrix.as_mut() {
            for a in 0..e {
                for q in 0..p {
                    let jq = j[a * p + q] / (c * c);
                    if jq == 0.0 {
                        continue;
                    }
                    for (mv, kv) in m[q * p..(q + 1) * p].iter_mut().zip(&k[a * p..(a + 1) * p]) {
                        *mv += jq * kv;
                    }
                }
            }
        }
    }
    Ok(VarianceReport {
        trace: diagonal.iter().sum(),
        diagonal,
        matrix,
    })
}

/// Mean pairwise cosine similarity of synthetic embeddings within a class,
/// averaged over classes.
pub fn diversity_probe<T: crate::Scalar>(model: &KfsModel<T>, net: &FeatureNet<T>, norm: &Normalization) -> Result<f64> {
    let per_class = model.codes_per_class() * model.num_decoders();
    if per_class < 2 {
        return Err(Error::Invalid("diversity needs at least two synthetic images per class".into()));
    }
    let images = model.render(&model.triples())?;
    let emb = net.embed(&norm.apply(&images)?)?;
    let e = net.embed_dim();
    let rows: Vec<Vec<f64>> = emb.data().chunks(e).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect();
    let mut total = 0.0;
    for class in rows.chunks(per_class) {
        let mut sum = 0.0;
        let mut pairs = 0;
        for i in 0..class.len() {
            for j in i + 1..class.len() {
                sum += cosine(&class[i], &class[j]);
                pairs += 1;
            }
        }
        total += sum / pairs as f64;
    }
    Ok(total / model.num_classes() as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    dot / (na * nb)
}

/// A small random instance for the exactness checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub classes: usize,
    pub per_class: usize,
    pub codes: usize,
    pub decoders: usize,
    /// `[C, H, W]`.
    pub image_shape: [usize; 3],
    pub decoder: DecoderKind,
    pub width: usize,
    pub depth: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            per_class: 4,
            codes: 3,
            decoders: 2,
            image_shape: [3, 8, 8],
            decoder: DecoderKind::LowR,
            width: 16,
            depth: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Toy {
    pub model: KfsModel<f64>,
    pub net: FeatureNet<f64>,
    pub norm: Normalization,
    pub real: RealEmbeddings,
}

impl Toy {
    pub fn build(cfg: &ToyConfig) -> Result<Self> {
        let spec = DecoderSpec::for_image(cfg.decoder, cfg.image_shape)?;
        let codebook = LatentCodebook::gaussian(cfg.classes, cfg.codes, spec.code_shape, 1.0, cfg.seed)?;
        let bank = DecoderBank::build(&spec, cfg.decoders, cfg.seed)?;
        let model = KfsModel::new(codebook, bank)?;
        let net = FeatureNet::build(&FeatureNetConfig::new(cfg.image_shape, cfg.width, cfg.depth, cfg.seed))?;
        let norm = Normalization::identity(cfg.image_shape[0]);
        let mut r = rng::stream("toy.images", cfg.seed);
        let [ch, h, w] = cfg.image_shape;
        let images: Vec<Tensor<f64>> = (0..cfg.classes)
            .map(|_| Tensor::from_fn(&[cfg.per_class, ch, h, w], |_| r.random::<f64>()))
            .collect();
        let real = RealEmbeddings::compute(&net, &norm, &images)?;
        Ok(Self { model, net, norm, real })
    }

    pub fn objective(&self) -> Objective<'_, f64> {
        Objective {
            net: &self.net,
            norm: &self.norm,
            targets: &self.real.means,
        }
    }
}

/// Finite-difference check of the full matching loss with respect to every
/// code and decoder parameter of `toy`.
pub fn loss_gradcheck(toy: &Toy, h: f64) -> Result<NamedCheck> {
    let model = &toy.model;
    let obj = toy.objective();
    let selection = full_selection(model);
    let inputs: Vec<Tensor<f64>> = model.params().into_iter().cloned().collect();
    let per_decoder = (inputs.len() - 1) / model.num_decoders();
    let [ch, hh, ww] = model.codebook.code_shape();
    let rows = model.num_classes() * model.codes_per_class();
    let report = gradcheck::check(&inputs, h, |tape, v| {
        let vars = ModelVars {
            codes: v[0],
            flat_codes: tape.reshape(v[0], &[rows, ch, hh, ww])?,
            decoders: v[1..].chunks(per_decoder).map(<[_]>::to_vec).collect(),
        };
        let targets = tape.constant(obj.targets.clone());
        matching::selection_loss_on(tape, model, &vars, &obj, targets, &selection).map_err(|e| match e {
            Error::Tensor(t) => t,
            other => TensorError::Unsupported {
                op: "matching_loss",
                detail: other.to_string(),
            },
        })
    })?;
    Ok(NamedCheck {
        name: "matching_loss",
        report,
    })
}

/// Every tape primitive plus the end-to-end matching loss on the default toy.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<NamedCheck>> {
    let mut out = gradcheck::primitive_suite(seed)?;
    let toy = Toy::build(&ToyConfig {
        seed,
        ..ToyConfig::default()
    })?;
    out.push(loss_gradcheck(&toy, 1e-6)?);
    Ok(out)
}

/// One line of a closed-form versus enumeration comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub term: String,
    pub closed_form: f64,
    pub exhaustive: f64,
    pub abs_err: f64,
    pub rel_err: f64,
}

/// Per-coordinate comparison. Coordinates are scaled by
/// `max(|exhaustive_i|, floor * max_j |exhaustive_j|)`.
pub fn compare(names: impl Fn(usize) -> String, closed: &[f64], exhaustive: &[f64], floor: f64) -> Vec<ComparisonRow> {
    let scale = exhaustive.iter().fold(0.0f64, |a, v| a.max(v.abs())) * floor;
    closed
        .iter()
        .zip(exhaustive)
        .enumerate()
        .map(|(i, (&a, &b))| {
            let abs_err = (a - b).abs();
            let denom = b.abs().max(scale);
            ComparisonRow {
                term: names(i),
                closed_form: a,
                exhaustive: b,
                abs_err,
                rel_err: if denom == 0.0 { abs_err } else { abs_err / denom },
            }
        })
        .collect()
}

/// Entry-wise comparison of two `P x P` covariance matrices. Entry `(i, j)`
/// is scaled by `sqrt(S_ii * S_jj)` of the enumerated matrix `S`, so the
/// diagonal reduces to the per-coordinate relative error.
pub fn compare_covariance(
    names: impl Fn(usize) -> String,
    closed: &[f64],
    exhaustive: &[f64],
    p: usize,
) -> Result<Vec<ComparisonRow>> {
    if closed.len() != p * p || exhaustive.len() != p * p {
        return Err(Error::Invalid(format!("covariance matrices must have {p}x{p} entries")));
    }
    let mut rows = Vec::with_capacity(p * p);
    for i in 0..p {
        for j in 0..p {
            let (a, b) = (closed[i * p + j], exhaustive[i * p + j]);
            let abs_err = (a - b).abs();
            let denom = (exhaustive[i * p + i] * exhaustive[j * p + j]).abs().sqrt();
            rows.push(ComparisonRow {
                term: format!("cov[{},{}]", names(i), names(j)),
                closed_form: a,
                exhaustive: b,
                abs_err,
                rel_err: if denom == 0.0 { abs_err } else { abs_err / denom },
            });
        }
    }
    Ok(rows)
}

/// Largest `rel_err` among `rows`.
pub fn worst(rows: &[ComparisonRow]) -> f64 {
    rows.iter().map(|r| r.rel_err).fold(0.0, f64::max)
}

/// Closed-form bias against the enumerated mean of all synthetic-pair
/// gradients minus the full gradient, one row per parameter.
pub fn bias_rows(toy: &Toy) -> Result<Vec<ComparisonRow>> {
    let (_, full) = matching::full_gradient(&toy.model, &toy.objective())?;
    let moments = exhaustive_pair_moments(&toy.real, &toy.model, &toy.net, &toy.norm)?;
    let empirical: Vec<f64> = moments.mean.iter().zip(full.flatten()).map(|(m, g)| m - g).collect();
    let closed = bias_closed_form(&toy.model, &toy.net, &toy.norm)?.flatten();
    Ok(compare(|i| coordinate_name(&toy.model, i), &closed, &empirical, 0.0))
}

/// Full gradient against the enumerated mean of all real-index gradients.
pub fn unbiased_rows(toy: &Toy) -> Result<Vec<ComparisonRow>> {
    let (_, full) = matching::full_gradient(&toy.model, &toy.objective())?;
    let moments = exhaustive_real_moments(&toy.real, &toy.model, &toy.net, &toy.norm, false)?;
    Ok(compare(|i| coordinate_name(&toy.model, i), &full.flatten(), &moments.mean, 0.0))
}

/// Closed-form variance of the real-index estimator against enumeration:
/// a `trace` row, one row per diagonal entry, and with `matrix` every
/// covariance entry.
pub fn variance_rows(toy: &Toy, matrix: bool) -> Result<Vec<ComparisonRow>> {
    let output = if matrix {
        VarianceOutput::Matrix {
            max_params: FULL_MATRIX_MAX_PARAMS,
        }
    } else {
        VarianceOutput::Trace
    };
    let closed = variance_closed_form(&toy.real, &toy.model, &toy.net, &toy.norm, output)?;
    let moments = exhaustive_real_moments(&toy.real, &toy.model, &toy.net, &toy.norm, matrix)?;
    let names: Vec<String> = (0..closed.diagonal.len()).map(|i| coordinate_name(&toy.model, i)).collect();
    let name = |i: usize| names[i].clone();
    let mut rows = compare(|_| "trace".into(), &[closed.trace], &[moments.trace()], 0.0);
    rows.extend(compare(|i| format!("var[{}]", name(i)), &closed.diagonal, &moments.variance, 0.0));
    if let (Some(a), Some(b)) = (&closed.matrix, &moments.covariance) {
        rows.extend(compare_covariance(name, a, b, closed.diagonal.len())?);
    }
    Ok(rows)
}

/// Human-readable name of flat gradient coordinate `i`.
pub fn coordinate_name(model: &KfsModel<f64>, i: usize) -> String {
    let mut offset = 0;
    for (k, p) in model.params().iter().enumerate() {
        if i < offset + p.numel() {
            let local = i - offset;
            if k == 0 {
                return format!("codes[{local}]");
            }
            let per = p.numel();
            let layers = model.bank.spec().channel_path().len() - 1;
            let d = (k - 1) / (2 * layers);
            let l = ((k - 1) % (2 * layers)) / 2;
            let what = if (k - 1) % 2 == 0 { "weight" } else { "bias" };
            debug_assert!(local < per);
            return format!("decoder{d}.layer{l}.{what}[{local}]");
        }
        offset += p.numel();
    }
    format!("param[{i}]")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matching_loss_passes_finite_differences() {
        let toy = Toy::build(&ToyConfig::default()).unwrap();
        let c = loss_gradcheck(&toy, 1e-6).unwrap();
        assert!(c.report.passes(1e-6), "{:?}", c.report);
    }

    fn tiny() -> Toy {
        Toy::build(&ToyConfig {
            classes: 2,
            per_class: 2,
            codes: 2,
            decoders: 1,
            image_shape: [1, 4, 4],
            decoder: DecoderKind::HighR,
            width: 3,
            depth: 2,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn bias_vanishes_for_single_pair() {
        let mut cfg = ToyConfig {
            codes: 1,
            decoders: 1,
            image_shape: [1, 4, 4],
            decoder: DecoderKind::HighR,
            width: 3,
            depth: 2,
            ..ToyConfig::default()
        };
        cfg.seed = 2;
        let toy = Toy::build(&cfg).unwrap();
        let b = bias_closed_form(&toy.model, &toy.net, &toy.norm).unwrap();
        assert!(b.max_abs() < 1e-14);
    }

    #[test]
    fn single_real_example_is_exact() {
        let mut cfg = ToyConfig {
            per_class: 1,
            image_shape: [1, 4, 4],
            decoder: DecoderKind::HighR,
            width: 3,
            depth: 2,
            ..ToyConfig::default()
        };
        cfg.seed = 3;
        let toy = Toy::build(&cfg).unwrap();
        let (_, full) = matching::full_gradient(&toy.model, &toy.objective()).unwrap();
        let (_, sub) =
            subsampled_gradient(&Draw::Real(vec![0, 0]), &toy.real, &toy.model, &toy.net, &toy.norm).unwrap();
        assert!(full.sub(&sub).max_abs() < 1e-14);
        let v = variance_closed_form(&toy.real, &toy.model, &toy.net, &toy.norm, VarianceOutput::Trace).unwrap();
        assert!(v.trace.abs() < 1e-20);
    }

    #[test]
    fn draws_are_in_range_and_reproducible() {
        let s = SubsampleScheme {
            mode: SubsampleMode::RealIndex,
            seed: 9,
        };
        for step in 0..50 {
            let Draw::Real(idx) = s.draw(step, 2, 2, &[3, 1]).unwrap() else {
                panic!()
            };
            assert!(idx[0] < 3 && idx[1] == 0);
            assert_eq!(s.draw(step, 2, 2, &[3, 1]).unwrap(), Draw::Real(idx));
        }
        assert!(s.draw(0, 2, 2, &[3, 0]).is_err());
    }

    #[test]
    fn matrix_mode_respects_guard() {
        let toy = tiny();
        let r = variance_closed_form(
            &toy.real,
            &toy.model,
            &toy.net,
            &toy.norm,
            VarianceOutput::Matrix { max_params: 10 },
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn diversity_probe_edges() {
        let toy = tiny();
        let d = diversity_probe(&toy.model, &toy.net, &toy.norm).unwrap();
        assert!((-1.0..=1.0).contains(&d));
        assert!((cosine(&[1.0, 0.0], &[0.0, 2.0])).abs() < 1e-15);
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-15);
        let mut cfg = ToyConfig {
            codes: 1,
            decoders: 1,
            image_shape: [1, 4, 4],
            decoder: DecoderKind::HighR,
            width: 3,
            depth: 2,
            ..ToyConfig::default()
        };
        cfg.seed = 1;
        let single = Toy::build(&cfg).unwrap();
        assert!(diversity_probe(&single.model, &single.net, &single.norm).is_err());
    }

    #[test]
    fn coordinate_names_cover_layout() {
        let toy = tiny();
        assert_eq!(coordinate_name(&toy.model, 0), "codes[0]");
        let codes = toy.model.codebook.codes().numel();
        assert_eq!(coordinate_name(&toy.model, codes), "decoder0.layer0.weight[0]");
    }
}
