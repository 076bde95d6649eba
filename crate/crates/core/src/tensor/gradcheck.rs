//! Central finite-difference checks for taped computations.

use super::{Scalar, Tape, Tensor, TensorError, Var};

/// Norm-wise comparison of an analytic and a numeric gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over all inputs.
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub evaluations: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err < tol
    }
}

/// Relative error `||a - b|| / max(||a||, ||b||)`; zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares tape gradients of `build` against central differences with step `h`.
///
/// `build` records a scalar loss from the given input variables; it is called
/// once with differentiable inputs and twice per input coordinate with
/// constant inputs.
pub fn check<T, F>(inputs: &[Tensor<T>], h: f64, build: F) -> Result<GradCheckReport, TensorError>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|&v| grads.get(v).expect("leaf gradient").data().iter().map(|g| g.as_f64()))
        .collect();

    let eval = |inputs: &[Tensor<T>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item().as_f64())
    };

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut evaluations = 1;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = T::of(orig.as_f64() + h);
            let plus = eval(&work)?;
            work[i].data_mut()[j] = T::of(orig.as_f64() - h);
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            evaluations += 2;
            numeric.push((plus - minus) / (2.0 * h));
        }
    }

    let max_abs_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        rel_err: rel_err(&analytic, &numeric),
        max_abs_err,
        analytic_norm: analytic.iter().map(|x| x * x).sum::<f64>().sqrt(),
        numeric_norm: numeric.iter().map(|x| x * x).sum::<f64>().sqrt(),
        evaluations,
    })
}

/// One named finite-difference check.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn gaussian(r: &mut crate::rng::StreamRng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| crate::rng::normal(r, 1.0))
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(r: &mut crate::rng::StreamRng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = crate::rng::uniform(r, 1.0);
        v + 0.2 * v.signum()
    })
}

/// Contracts `y` with a fixed random tensor so every output coordinate
/// reaches the scalar loss with a distinct weight.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let mut r = crate::rng::stream("gradcheck.projection", seed);
    let w = gaussian(&mut r, tape.shape(y));
    let wv = tape.constant(w);
    tape.dot(y, wv)
}

/// Central-difference checks of every tape primitive in f64.
pub fn primitive_suite(seed: u64) -> Result<Vec<NamedCheck>, TensorError> {
    let mut r = crate::rng::stream("gradcheck.inputs", seed);
    let h = 1e-6;
    let mut out = Vec::new();
    let mut run = |name: &'static str,
                   inputs: Vec<Tensor<f64>>,
                   f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>|
     -> Result<(), TensorError> {
        let report = check(&inputs, h, |t, v| {
            let y = f(t, v)?;
            project(t, y, seed)
        })?;
        out.push(NamedCheck { name, report });
        Ok(())
    };

    let x = gaussian(&mut r, &[2, 3, 5, 5]);
    let w = gaussian(&mut r, &[4, 3, 3, 3]);
    let b = gaussian(&mut r, &[4]);
    run("conv2d_3x3_pad1", vec![x.clone(), w, b], &|t, v| t.conv2d(v[0], v[1], v[2], 1, 1))?;
    let x = gaussian(&mut r, &[2, 2, 6, 6]);
    let w = gaussian(&mut r, &[3, 2, 2, 2]);
    let b = gaussian(&mut r, &[3]);
    run("conv2d_2x2_stride2", vec![x, w, b], &|t, v| t.conv2d(v[0], v[1], v[2], 2, 0))?;
    let x = gaussian(&mut r, &[2, 3, 2, 3]);
    let w = gaussian(&mut r, &[3, 2, 2, 2]);
    let b = gaussian(&mut r, &[2]);
    run("conv_transpose2d", vec![x, w, b], &|t, v| t.conv_transpose2d(v[0], v[1], v[2], 2))?;
    run("relu", vec![away_from_zero(&mut r, &[3, 4])], &|t, v| Ok(t.relu(v[0])))?;
    run("sigmoid", vec![gaussian(&mut r, &[3, 4])], &|t, v| Ok(t.sigmoid(v[0])))?;
    run("avg_pool2d", vec![gaussian(&mut r, &[2, 2, 4, 6])], &|t, v| t.avg_pool2d(v[0]))?;
    run("instance_norm", vec![gaussian(&mut r, &[2, 3, 4, 4])], &|t, v| t.instance_norm(v[0]))?;
    run("reshape", vec![gaussian(&mut r, &[2, 6])], &|t, v| t.reshape(v[0], &[3, 4]))?;
    run("flatten", vec![gaussian(&mut r, &[2, 2, 3])], &|t, v| t.flatten(v[0]))?;
    run("standardize", vec![gaussian(&mut r, &[2, 2, 3, 3])], &|t, v| {
        t.standardize(v[0], &[0.3, -0.2], &[0.5, 2.0])
    })?;
    let x = gaussian(&mut r, &[3, 5]);
    let w = gaussian(&mut r, &[4, 5]);
    let b = gaussian(&mut r, &[4]);
    run("linear", vec![x, w, b], &|t, v| t.linear(v[0], v[1], v[2]))?;
    run("cross_entropy", vec![gaussian(&mut r, &[4, 3])], &|t, v| t.cross_entropy(v[0], &[0, 2, 1, 2]))?;
    let a = gaussian(&mut r, &[2, 3]);
    let b = gaussian(&mut r, &[2, 3]);
    run("add", vec![a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]))?;
    run("sub", vec![a.clone(), b.clone()], &|t, v| t.sub(v[0], v[1]))?;
    run("scale", vec![a.clone()], &|t, v| Ok(t.scale(v[0], -1.7)))?;
    run("sum", vec![a.clone()], &|t, v| Ok(t.sum(v[0])))?;
    run("mean", vec![a.clone()], &|t, v| t.mean(v[0]))?;
    run("dot", vec![a, b], &|t, v| t.dot(v[0], v[1]))?;
    let m = gaussian(&mut r, &[4, 3]);
    run("row_mean", vec![m.clone()], &|t, v| t.row_mean(v[0], &[3, 0, 3]))?;
    run("select_rows", vec![m.clone()], &|t, v| t.select_rows(v[0], &[2, 2, 0]))?;
    let n = gaussian(&mut r, &[2, 3]);
    run("concat0", vec![m, n], &|t, v| t.concat0(&[v[0], v[1], v[0]]))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        for c in primitive_suite(0).unwrap() {
            assert!(c.report.passes(1e-6), "{}: {:?}", c.name, c.report);
        }
    }

    #[test]
    fn rel_err_is_symmetric_and_scale_free() {
        assert_eq!(rel_err(&[0.0], &[0.0]), 0.0);
        let e = rel_err(&[1.0, 2.0], &[1.0, 2.1]);
        assert!((e - rel_err(&[10.0, 20.0], &[10.0, 21.0])).abs() < 1e-15);
        assert_eq!(e, rel_err(&[1.0, 2.1], &[1.0, 2.0]));
    }
}
