use super::kernels::{self, ConvGeom};
use super::{mismatch, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom },
    ConvTranspose2d { x: usize, w: usize, b: usize, geom: ConvGeom },
    Relu(usize),
    Sigmoid(usize),
    AvgPool2 { x: usize, planes: usize, h: usize, w: usize },
    InstanceNorm { x: usize, area: usize, inv_std: Vec<T> },
    Reshape(usize),
    Standardize { x: usize, std: Vec<T>, area: usize },
    Linear { x: usize, w: usize, b: usize, n: usize, f: usize, k: usize },
    CrossEntropy { logits: usize, labels: Vec<usize>, k: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, T),
    Sum(usize),
    Mean(usize),
    Dot(usize, usize),
    RowMean { x: usize, rows: Vec<usize> },
    SelectRows { x: usize, rows: Vec<usize> },
    Concat0(Vec<usize>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records primitive operations in execution order for one backward pass.
///
/// A tape is single use: after [`Tape::backward`] it refuses a second pass.
/// Values are never mutated once recorded.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn var(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let geom = ConvGeom::conv2d(self.shape(x), self.shape(w), self.shape(b), stride, pad)?;
        let y = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let value = Tensor::new(geom.out_shape(), y)?;
        let ng = self.ng(x.0) || self.ng(w.0) || self.ng(b.0);
        Ok(self.push(value, Op::Conv2d { x: x.0, w: w.0, b: b.0, geom }, ng))
    }

    /// Transposed convolution with `kernel == stride`; weight is `[Cin, Cout, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var, TensorError> {
        let geom = ConvGeom::conv_transpose2d(self.shape(x), self.shape(w), self.shape(b), stride)?;
        let y = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let value = Tensor::new(geom.out_shape(), y)?;
        let ng = self.ng(x.0) || self.ng(w.0) || self.ng(b.0);
        Ok(self.push(value, Op::ConvTranspose2d { x: x.0, w: w.0, b: b.0, geom }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.ng(x.0);
        self.push(value, Op::Relu(x.0), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::sigmoid);
        let ng = self.ng(x.0);
        self.push(value, Op::Sigmoid(x.0), ng)
    }

    /// 2x2 average pooling with stride 2 over the last two axes.
    pub fn avg_pool2d(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(mismatch("avg_pool2d", "rank", ">= 2", shape.len()));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(mismatch("avg_pool2d", "even spatial extent", "even", [h, w]));
        }
        let planes = shape[..shape.len() - 2].iter().product();
        let y = kernels::avg_pool2_forward(self.value(x).data(), planes, h, w);
        let mut out_shape = shape.clone();
        let r = out_shape.len();
        out_shape[r - 2] = h / 2;
        out_shape[r - 1] = w / 2;
        let value = Tensor::new(out_shape, y)?;
        let ng = self.ng(x.0);
        Ok(self.push(value, Op::AvgPool2 { x: x.0, planes, h, w }, ng))
    }

    /// Per-(sample, channel) normalization over the spatial axes of `[N, C, H, W]`.
    pub fn instance_norm(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(mismatch("instance_norm", "rank", 4, shape.len()));
        }
        let area = shape[2] * shape[3];
        if area == 0 {
            return Err(TensorError::EmptyPlane { op: "instance_norm" });
        }
        let planes = shape[0] * shape[1];
        let (y, inv_std) = kernels::instance_norm_forward(self.value(x).data(), planes, area);
        let value = Tensor::new(shape, y)?;
        let ng = self.ng(x.0);
        Ok(self.push(value, Op::InstanceNorm { x: x.0, area, inv_std }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x.0);
        Ok(self.push(value, Op::Reshape(x.0), ng))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x);
        if shape.is_empty() {
            return Err(mismatch("flatten", "rank", ">= 1", 0));
        }
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Per-channel `(x - mean[c]) / std[c]` on `[N, C, H, W]` with constant statistics.
    pub fn standardize(&mut self, x: Var, mean: &[T], std: &[T]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != mean.len() || mean.len() != std.len() {
            return Err(mismatch("standardize", "channels", mean.len(), &shape));
        }
        let area = shape[2] * shape[3];
        let src = self.value(x).data();
        let mut y = Vec::with_capacity(src.len());
        for (i, chunk) in src.chunks(area.max(1)).enumerate() {
            let c = i % shape[1];
            y.extend(chunk.iter().map(|&v| (v - mean[c]) / std[c]));
        }
        let value = Tensor::new(shape, y)?;
        let ng = self.ng(x.0);
        Ok(self.push(value, Op::Standardize { x: x.0, std: std.to_vec(), area }, ng))
    }

    /// `x [N, F]`, `w [K, F]`, `b [K]` -> `[N, K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 {
            return Err(mismatch("linear", "rank", 2, [xs.len(), ws.len()]));
        }
        if xs[1] != ws[1] {
            return Err(mismatch("linear", "feature dim", ws[1], xs[1]));
        }
        if bs != [ws[0]] {
            return Err(mismatch("linear", "bias length", [ws[0]], bs));
        }
        let (n, f, k) = (xs[0], xs[1], ws[0]);
        let y = kernels::linear_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), n, f, k);
        let value = Tensor::new(vec![n, k], y)?;
        let ng = self.ng(x.0) || self.ng(w.0) || self.ng(b.0);
        Ok(self.push(value, Op::Linear { x: x.0, w: w.0, b: b.0, n, f, k }, ng))
    }

    /// Mean softmax cross-entropy of `logits [N, K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
            return Err(mismatch("cross_entropy", "logits rows", labels.len(), shape));
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                extent: k,
            });
        }
        let loss = kernels::cross_entropy_forward(self.value(logits).data(), labels, k);
        let ng = self.ng(logits.0);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                k,
            },
            ng,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, "operand shape", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(value, Op::Add(a.0, b.0), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let bv = self.value(b).data();
        let mut value = self.value(a).clone();
        for (o, &v) in value.data_mut().iter_mut().zip(bv) {
            *o -= v;
        }
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(value, Op::Sub(a.0, b.0), ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        let ng = self.ng(x.0);
        self.push(value, Op::Scale(x.0, s), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x.0);
        self.push(value, Op::Sum(x.0), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(TensorError::EmptyPlane { op: "mean" });
        }
        let value = Tensor::scalar(self.value(x).sum() / T::of(n as f64));
        let ng = self.ng(x.0);
        Ok(self.push(value, Op::Mean(x.0), ng))
    }

    /// Inner product of two equally shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("dot", a, b)?;
        let value = Tensor::scalar(self.value(a).dot(self.value(b)));
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(value, Op::Dot(a.0, b.0), ng))
    }

    /// Mean over the selected leading-axis rows; drops the leading axis.
    pub fn row_mean(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || rows.is_empty() {
            return Err(TensorError::EmptyPlane { op: "row_mean" });
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(TensorError::IndexOutOfRange {
                op: "row_mean",
                index: bad,
                extent: shape[0],
            });
        }
        let inner: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut acc = vec![T::zero(); inner];
        for &r in rows {
            for (a, &v) in acc.iter_mut().zip(&src[r * inner..][..inner]) {
                *a += v;
            }
        }
        let inv = T::one() / T::of(rows.len() as f64);
        for a in &mut acc {
            *a *= inv;
        }
        let value = Tensor::new(shape[1..].to_vec(), acc)?;
        let ng = self.ng(x.0);
        Ok(self.push(value, Op::RowMean { x: x.0, rows: rows.to_vec() }, ng))
    }

    /// Gathers leading-axis rows (repetition allowed).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(mismatch("select_rows", "rank", ">= 1", 0));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(TensorError::IndexOutOfRange {
                op: "select_rows",
                index: bad,
                extent: shape[0],
            });
        }
        let inner: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            data.extend_from_slice(&src[r * inner..][..inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let value = Tensor::new(out_shape, data)?;
        let ng = self.ng(x.0);
        Ok(self.push(value, Op::SelectRows { x: x.0, rows: rows.to_vec() }, ng))
    }

    /// Concatenates along the leading axis.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::EmptyPlane { op: "concat0" });
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(mismatch("concat0", "trailing shape", &tail, s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(shape, data)?;
        let ng = parts.iter().any(|p| self.ng(p.0));
        Ok(self.push(value, Op::Concat0(parts.iter().map(|p| p.0).collect()), ng))
    }

    /// Reverse pass from a one-element `loss`. Consumes the tape's right to
    /// a second pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }

        let entries = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.needs_grad) {
                (Op::Leaf, true) => {
                    let shape = node.value.shape().to_vec();
                    Some(match g {
                        Some(data) => Tensor::new(shape, data).expect("gradient shape"),
                        None => Tensor::zeros(&shape),
                    })
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { entries })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |j: usize| self.nodes[j].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let need = [self.ng(*x), self.ng(*w), self.ng(*b)];
                let [gx, gw, gb] = kernels::conv2d_backward(val(*x), val(*w), g, geom, need);
                accumulate_opt(grads, *x, gx);
                accumulate_opt(grads, *w, gw);
                accumulate_opt(grads, *b, gb);
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let need = [self.ng(*x), self.ng(*w), self.ng(*b)];
                let [gx, gw, gb] = kernels::conv_transpose2d_backward(val(*x), val(*w), g, geom, need);
                accumulate_opt(grads, *x, gx);
                accumulate_opt(grads, *w, gw);
                accumulate_opt(grads, *b, gb);
            }
            Op::Relu(x) => {
                let gx = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = self.nodes[i]
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| gv * y * (T::one() - y))
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::AvgPool2 { x, planes, h, w } => {
                accumulate(grads, *x, kernels::avg_pool2_backward(g, *planes, *h, *w));
            }
            Op::InstanceNorm { x, area, inv_std } => {
                let gx = kernels::instance_norm_backward(self.nodes[i].value.data(), inv_std, g, *area);
                accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::Standardize { x, std, area } => {
                let c = std.len();
                let mut gx = Vec::with_capacity(g.len());
                for (p, chunk) in g.chunks((*area).max(1)).enumerate() {
                    let s = std[p % c];
                    gx.extend(chunk.iter().map(|&v| v / s));
                }
                accumulate(grads, *x, gx);
            }
            Op::Linear { x, w, b, n, f, k } => {
                let need = [self.ng(*x), self.ng(*w), self.ng(*b)];
                let [gx, gw, gb] = kernels::linear_backward(val(*x), val(*w), g, *n, *f, *k, need);
                accumulate_opt(grads, *x, gx);
                accumulate_opt(grads, *w, gw);
                accumulate_opt(grads, *b, gb);
            }
            Op::CrossEntropy { logits, labels, k } => {
                let n = labels.len();
                let mut p = kernels::softmax_rows(val(*logits), n, *k);
                let scale = g[0] / T::of(n as f64);
                for (r, &y) in labels.iter().enumerate() {
                    p[r * k + y] -= T::one();
                }
                for v in &mut p {
                    *v *= scale;
                }
                accumulate(grads, *logits, p);
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Scale(x, s) => accumulate(grads, *x, g.iter().map(|&v| v * *s).collect()),
            Op::Sum(x) => accumulate(grads, *x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                accumulate(grads, *x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::Dot(a, b) => {
                // Visit order matches `Add` so `dot(x, x)` accumulates deterministically.
                if self.ng(*a) {
                    accumulate(grads, *a, val(*b).iter().map(|&v| v * g[0]).collect());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, val(*a).iter().map(|&v| v * g[0]).collect());
                }
            }
            Op::RowMean { x, rows } => {
                let len = val(*x).len();
                let inner = g.len();
                let inv = T::one() / T::of(rows.len() as f64);
                let mut gx = vec![T::zero(); len];
                for &r in rows {
                    for (o, &v) in gx[r * inner..][..inner].iter_mut().zip(g) {
                        *o += v * inv;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::SelectRows { x, rows } => {
                let len = val(*x).len();
                let inner = if rows.is_empty() { 0 } else { g.len() / rows.len() };
                let mut gx = vec![T::zero(); len];
                for (k, &r) in rows.iter().enumerate() {
                    for (o, &v) in gx[r * inner..][..inner].iter_mut().zip(&g[k * inner..][..inner]) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Concat0(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    if self.ng(p) {
                        accumulate(grads, p, g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], idx: usize, g: Vec<T>) {
    match &mut grads[idx] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_opt<T: Scalar>(grads: &mut [Option<Vec<T>>], idx: usize, g: Option<Vec<T>>) {
    if let Some(g) = g {
        accumulate(grads, idx, g);
    }
}

/// Gradients of every `requires_grad` leaf of a consumed tape.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar = f32> {
    entries: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` for constants and intermediate values.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.entries.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.entries.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn shared_input_accumulates_gradient() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[2], &[1.0, -3.0]));
        let y = tape.dot(x, x).unwrap();
        let z = tape.add(y, y).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0, -12.0]);
    }

    #[test]
    fn constants_and_frozen_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1], &[2.0]));
        let b = tape.leaf(t(&[1], &[5.0]), false);
        let c = tape.var(t(&[1], &[7.0]));
        let ab = tape.add(a, b).unwrap();
        let s = tape.dot(ab, c).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(a).is_none() && g.get(b).is_none());
        assert_eq!(g.get(c).unwrap().data(), &[7.0]);
    }

    #[test]
    fn backward_needs_scalar_and_fresh_tape() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut tape = Tape::new();
        let a = tape.var(t(&[2], &[1.0, 2.0]));
        let b = tape.var(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.reshape(a, &[3]).is_err());
        assert!(tape.select_rows(a, &[2]).is_err());
        assert!(tape.row_mean(a, &[]).is_err());
    }

    #[test]
    fn row_ops_values() {
        let mut tape = Tape::new();
        let m = tape.var(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let r = tape.row_mean(m, &[0, 2]).unwrap();
        assert_eq!(tape.value(r).data(), &[3.0, 4.0]);
        let s = tape.select_rows(m, &[2, 0]).unwrap();
        assert_eq!(tape.value(s).data(), &[5.0, 6.0, 1.0, 2.0]);
        let c = tape.concat0(&[s, m]).unwrap();
        assert_eq!(tape.shape(c), &[5, 2]);
    }
}
