//! Forward and backward kernels over raw row-major buffers.
//!
//! Shape validation happens in the tape; the kernels trust their dimension
//! structs. Every reduction runs in a fixed loop order so that repeated
//! evaluation is bit-identical.

use super::{mismatch, Scalar, TensorError};

/// Resolved geometry of a 2-d convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn conv2d(
        x: &[usize],
        w: &[usize],
        b: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self, TensorError> {
        const OP: &str = "conv2d";
        if x.len() != 4 {
            return Err(mismatch(OP, "input rank", 4, x.len()));
        }
        if w.len() != 4 {
            return Err(mismatch(OP, "weight rank", 4, w.len()));
        }
        if w[2] != w[3] {
            return Err(mismatch(OP, "square kernel", w[2], w[3]));
        }
        if w[1] != x[1] {
            return Err(mismatch(OP, "input channels", w[1], x[1]));
        }
        if b != [w[0]] {
            return Err(mismatch(OP, "bias length", [w[0]], b));
        }
        if stride == 0 {
            return Err(TensorError::Unsupported {
                op: OP,
                detail: "stride must be positive".into(),
            });
        }
        let k = w[2];
        if k == 0 || k > x[2] + 2 * pad || k > x[3] + 2 * pad {
            return Err(mismatch(OP, "kernel extent vs padded input", k, [x[2], x[3]]));
        }
        Ok(Self {
            batch: x[0],
            in_ch: x[1],
            in_h: x[2],
            in_w: x[3],
            out_ch: w[0],
            kernel: k,
            stride,
            pad,
            out_h: (x[2] + 2 * pad - k) / stride + 1,
            out_w: (x[3] + 2 * pad - k) / stride + 1,
        })
    }

    /// Geometry for a transposed convolution whose kernel equals its stride.
    /// `out_*` describe the upsampled output.
    pub fn conv_transpose2d(
        x: &[usize],
        w: &[usize],
        b: &[usize],
        stride: usize,
    ) -> Result<Self, TensorError> {
        const OP: &str = "conv_transpose2d";
        if x.len() != 4 {
            return Err(mismatch(OP, "input rank", 4, x.len()));
        }
        if w.len() != 4 {
            return Err(mismatch(OP, "weight rank", 4, w.len()));
        }
        if w[2] != w[3] {
            return Err(mismatch(OP, "square kernel", w[2], w[3]));
        }
        if w[2] != stride || stride == 0 {
            return Err(TensorError::Unsupported {
                op: OP,
                detail: format!("kernel {} with stride {stride}; only kernel == stride is supported", w[2]),
            });
        }
        if w[0] != x[1] {
            return Err(mismatch(OP, "input channels", w[0], x[1]));
        }
        if b != [w[1]] {
            return Err(mismatch(OP, "bias length", [w[1]], b));
        }
        Ok(Self {
            batch: x[0],
            in_ch: x[1],
            in_h: x[2],
            in_w: x[3],
            out_ch: w[1],
            kernel: stride,
            stride,
            pad: 0,
            out_h: x[2] * stride,
            out_w: x[3] * stride,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.out_h, self.out_w]
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in range.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pad > kx {
            (self.pad - kx).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if self.in_w + self.pad > kx {
            ((self.in_w + self.pad - kx - 1) / self.stride + 1).min(self.out_w)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.in_h).then_some(iy as usize)
    }
}

/// `c[m, n] += a[m, k] * b[k, n]`.
fn gemm_nn<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in crow.iter_mut().zip(&b[p * n..][..n]) {
                *o += av * bv;
            }
        }
    }
}

/// `c[m, n] += a[k, m]^T * b[k, n]`.
fn gemm_tn<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let brow = &b[p * n..][..n];
        for i in 0..m {
            let av = a[p * m + i];
            for (o, &bv) in c[i * n..][..n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `c[m, n] += a[m, k] * b[n, k]^T`, each entry a dot product with eight
/// interleaved partial sums.
fn gemm_nt<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..][..k];
        for j in 0..n {
            c[i * n + j] += dot_lanes(arow, &b[j * k..][..k]);
        }
    }
}

#[inline]
fn dot_lanes<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Unfolds `x` into columns `[in_ch * k * k, batch * out_h * out_w]`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, s) = (g.kernel, g.stride);
    let plane = g.out_h * g.out_w;
    let cols_n = g.batch * plane;
    let mut cols = vec![T::zero(); g.in_ch * k * k * cols_n];
    for ci in 0..g.in_ch {
        for ky in 0..k {
            for kx in 0..k {
                let q = (ci * k + ky) * k + kx;
                let (lo, hi) = g.col_range(kx);
                for n in 0..g.batch {
                    let xin = &x[(n * g.in_ch + ci) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    let dst = &mut cols[q * cols_n + n * plane..][..plane];
                    for oy in 0..g.out_h {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let irow = &xin[iy * g.in_w..][..g.in_w];
                        let orow = &mut dst[oy * g.out_w..][..g.out_w];
                        for ox in lo..hi {
                            orow[ox] = irow[ox * s + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates columns back into an input gradient.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, gx: &mut [T]) {
    let (k, s) = (g.kernel, g.stride);
    let plane = g.out_h * g.out_w;
    let cols_n = g.batch * plane;
    for ci in 0..g.in_ch {
        for ky in 0..k {
            for kx in 0..k {
                let q = (ci * k + ky) * k + kx;
                let (lo, hi) = g.col_range(kx);
                for n in 0..g.batch {
                    let gin = &mut gx[(n * g.in_ch + ci) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    let src = &cols[q * cols_n + n * plane..][..plane];
                    for oy in 0..g.out_h {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let grow = &mut gin[iy * g.in_w..][..g.in_w];
                        let srow = &src[oy * g.out_w..][..g.out_w];
                        for ox in lo..hi {
                            grow[ox * s + kx - g.pad] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// `[batch, ch, plane]` to `[ch, batch * plane]`.
fn batch_major_to_channel_major<T: Scalar>(x: &[T], batch: usize, ch: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for n in 0..batch {
        for c in 0..ch {
            out[(c * batch + n) * plane..][..plane].copy_from_slice(&x[(n * ch + c) * plane..][..plane]);
        }
    }
    out
}

fn channel_major_to_batch_major<T: Scalar>(x: &[T], batch: usize, ch: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for n in 0..batch {
        for c in 0..ch {
            out[(n * ch + c) * plane..][..plane].copy_from_slice(&x[(c * batch + n) * plane..][..plane]);
        }
    }
    out
}

pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.out_h * g.out_w;
    let cols_n = g.batch * plane;
    let q = g.in_ch * g.kernel * g.kernel;
    let cols = im2col(x, g);
    let mut y = vec![T::zero(); g.out_ch * cols_n];
    for (co, &bv) in b.iter().enumerate() {
        y[co * cols_n..][..cols_n].fill(bv);
    }
    gemm_nn(g.out_ch, cols_n, q, w, &cols, &mut y);
    channel_major_to_batch_major(&y, g.batch, g.out_ch, plane)
}

/// Gradients of `conv2d` with respect to input, weight and bias; each is
/// only computed when requested.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    g: &ConvGeom,
    need: [bool; 3],
) -> [Option<Vec<T>>; 3] {
    let plane = g.out_h * g.out_w;
    let cols_n = g.batch * plane;
    let q = g.in_ch * g.kernel * g.kernel;
    let gy2 = batch_major_to_channel_major(gy, g.batch, g.out_ch, plane);
    let gb = need[2].then(|| {
        gy2.chunks(cols_n)
            .map(|row| row.chunks(plane).map(|p| p.iter().copied().sum::<T>()).sum::<T>())
            .collect()
    });
    let gw = need[1].then(|| {
        let cols = im2col(x, g);
        let mut gw = vec![T::zero(); w.len()];
        gemm_nt(g.out_ch, q, cols_n, &gy2, &cols, &mut gw);
        gw
    });
    let gx = need[0].then(|| {
        let mut gcols = vec![T::zero(); q * cols_n];
        gemm_tn(q, cols_n, g.out_ch, w, &gy2, &mut gcols);
        let mut gx = vec![T::zero(); x.len()];
        col2im(&gcols, g, &mut gx);
        gx
    });
    [gx, gw, gb]
}

/// Adds `z [(co, ky, kx), batch * in_plane]` into `[batch, co, out_h, out_w]`.
fn pixel_shuffle<T: Scalar>(z: &[T], g: &ConvGeom, y: &mut [T]) {
    let s = g.stride;
    let in_plane = g.in_h * g.in_w;
    let cols_n = g.batch * in_plane;
    let out_plane = g.out_h * g.out_w;
    for co in 0..g.out_ch {
        for ky in 0..s {
            for kx in 0..s {
                let row = &z[((co * s + ky) * s + kx) * cols_n..][..cols_n];
                for n in 0..g.batch {
                    let out = &mut y[(n * g.out_ch + co) * out_plane..][..out_plane];
                    let src = &row[n * in_plane..][..in_plane];
                    for iy in 0..g.in_h {
                        let orow = &mut out[(iy * s + ky) * g.out_w..][..g.out_w];
                        for ix in 0..g.in_w {
                            orow[ix * s + kx] += src[iy * g.in_w + ix];
                        }
                    }
                }
            }
        }
    }
}

/// Inverse of [`pixel_shuffle`]: gathers `[batch, co, out_h, out_w]` into
/// `[(co, ky, kx), batch * in_plane]`.
fn pixel_unshuffle<T: Scalar>(y: &[T], g: &ConvGeom) -> Vec<T> {
    let s = g.stride;
    let in_plane = g.in_h * g.in_w;
    let cols_n = g.batch * in_plane;
    let out_plane = g.out_h * g.out_w;
    let mut z = vec![T::zero(); g.out_ch * s * s * cols_n];
    for co in 0..g.out_ch {
        for ky in 0..s {
            for kx in 0..s {
                let row = &mut z[((co * s + ky) * s + kx) * cols_n..][..cols_n];
                for n in 0..g.batch {
                    let src = &y[(n * g.out_ch + co) * out_plane..][..out_plane];
                    let dst = &mut row[n * in_plane..][..in_plane];
                    for iy in 0..g.in_h {
                        let srow = &src[(iy * s + ky) * g.out_w..][..g.out_w];
                        for ix in 0..g.in_w {
                            dst[iy * g.in_w + ix] = srow[ix * s + kx];
                        }
                    }
                }
            }
        }
    }
    z
}

pub fn conv_transpose2d_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], g: &ConvGeom) -> Vec<T> {
    let s = g.stride;
    let in_plane = g.in_h * g.in_w;
    let cols_n = g.batch * in_plane;
    let rows = g.out_ch * s * s;
    let x2 = batch_major_to_channel_major(x, g.batch, g.in_ch, in_plane);
    let mut z = vec![T::zero(); rows * cols_n];
    gemm_tn(rows, cols_n, g.in_ch, w, &x2, &mut z);
    let out_plane = g.out_h * g.out_w;
    let mut y = vec![T::zero(); g.batch * g.out_ch * out_plane];
    for n in 0..g.batch {
        for (co, &bv) in b.iter().enumerate() {
            y[(n * g.out_ch + co) * out_plane..][..out_plane].fill(bv);
        }
    }
    pixel_shuffle(&z, g, &mut y);
    y
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    g: &ConvGeom,
    need: [bool; 3],
) -> [Option<Vec<T>>; 3] {
    let s = g.stride;
    let in_plane = g.in_h * g.in_w;
    let cols_n = g.batch * in_plane;
    let rows = g.out_ch * s * s;
    let out_plane = g.out_h * g.out_w;
    let gb = need[2].then(|| {
        let mut gb = vec![T::zero(); g.out_ch];
        for n in 0..g.batch {
            for (co, acc) in gb.iter_mut().enumerate() {
                *acc += gy[(n * g.out_ch + co) * out_plane..][..out_plane].iter().copied().sum::<T>();
            }
        }
        gb
    });
    if !need[0] && !need[1] {
        return [None, None, gb];
    }
    let gz = pixel_unshuffle(gy, g);
    let gw = need[1].then(|| {
        let x2 = batch_major_to_channel_major(x, g.batch, g.in_ch, in_plane);
        let mut gw = vec![T::zero(); w.len()];
        gemm_nt(g.in_ch, rows, cols_n, &x2, &gz, &mut gw);
        gw
    });
    let gx = need[0].then(|| {
        let mut gx2 = vec![T::zero(); g.in_ch * cols_n];
        gemm_nn(g.in_ch, cols_n, rows, w, &gz, &mut gx2);
        channel_major_to_batch_major(&gx2, g.batch, g.in_ch, in_plane)
    });
    [gx, gw, gb]
}

/// Non-overlapping 2x2 average pooling over `planes` planes of `h x w`.
pub fn avg_pool2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut y = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let xin = &x[p * h * w..][..h * w];
        let out = &mut y[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let i = 2 * oy * w + 2 * ox;
                out[oy * ow + ox] = (xin[i] + xin[i + 1] + xin[i + w] + xin[i + w + 1]) * quarter;
            }
        }
    }
    y
}

pub fn avg_pool2_backward<T: Scalar>(gy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let go = &gy[p * oh * ow..][..oh * ow];
        let gin = &mut gx[p * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = go[oy * ow + ox] * quarter;
                let i = 2 * oy * w + 2 * ox;
                gin[i] = v;
                gin[i + 1] = v;
                gin[i + w] = v;
                gin[i + w + 1] = v;
            }
        }
    }
    gx
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Normalizes each plane to zero mean and unit variance. Returns the output
/// and the per-plane inverse standard deviation.
pub fn instance_norm_forward<T: Scalar>(x: &[T], planes: usize, area: usize) -> (Vec<T>, Vec<T>) {
    let eps = T::of(INSTANCE_NORM_EPS);
    let inv_area = T::one() / T::of(area as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); planes];
    for p in 0..planes {
        let xin = &x[p * area..][..area];
        let mean = xin.iter().copied().sum::<T>() * inv_area;
        let var = xin.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_area;
        let is = T::one() / (var + eps).sqrt();
        inv_std[p] = is;
        for (o, &v) in y[p * area..][..area].iter_mut().zip(xin) {
            *o = (v - mean) * is;
        }
    }
    (y, inv_std)
}

pub fn instance_norm_backward<T: Scalar>(y: &[T], inv_std: &[T], gy: &[T], area: usize) -> Vec<T> {
    let inv_area = T::one() / T::of(area as f64);
    let mut gx = vec![T::zero(); y.len()];
    for (p, &is) in inv_std.iter().enumerate() {
        let yp = &y[p * area..][..area];
        let gp = &gy[p * area..][..area];
        let mean_g = gp.iter().copied().sum::<T>() * inv_area;
        let mean_gy = gp.iter().zip(yp).map(|(&g, &v)| g * v).sum::<T>() * inv_area;
        for ((o, &g), &v) in gx[p * area..][..area].iter_mut().zip(gp).zip(yp) {
            *o = is * (g - mean_g - v * mean_gy);
        }
    }
    gx
}

/// Logistic function clamped so that finite-precision outputs stay strictly
/// inside (0, 1).
#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    let s = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    let hi = T::one() - T::epsilon() / T::of(2.0);
    s.max(T::min_positive_value()).min(hi)
}

/// `x [n, f] * w[k, f]^T + b[k]`.
pub fn linear_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], n: usize, f: usize, k: usize) -> Vec<T> {
    let mut y = vec![T::zero(); n * k];
    for i in 0..n {
        let xi = &x[i * f..][..f];
        for j in 0..k {
            let wj = &w[j * f..][..f];
            let mut acc = b[j];
            for (&a, &c) in xi.iter().zip(wj) {
                acc += a * c;
            }
            y[i * k + j] = acc;
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    n: usize,
    f: usize,
    k: usize,
    need: [bool; 3],
) -> [Option<Vec<T>>; 3] {
    let gx = need[0].then(|| {
        let mut gx = vec![T::zero(); n * f];
        for i in 0..n {
            let row = &mut gx[i * f..][..f];
            for j in 0..k {
                let gv = gy[i * k + j];
                for (o, &wv) in row.iter_mut().zip(&w[j * f..][..f]) {
                    *o += gv * wv;
                }
            }
        }
        gx
    });
    let gw = need[1].then(|| {
        let mut gw = vec![T::zero(); k * f];
        for i in 0..n {
            let xi = &x[i * f..][..f];
            for j in 0..k {
                let gv = gy[i * k + j];
                for (o, &xv) in gw[j * f..][..f].iter_mut().zip(xi) {
                    *o += gv * xv;
                }
            }
        }
        gw
    });
    let gb = need[2].then(|| {
        let mut gb = vec![T::zero(); k];
        for i in 0..n {
            for j in 0..k {
                gb[j] += gy[i * k + j];
            }
        }
        gb
    });
    [gx, gw, gb]
}

/// Row-wise softmax of `logits [n, k]`.
pub fn softmax_rows<T: Scalar>(logits: &[T], n: usize, k: usize) -> Vec<T> {
    let mut p = vec![T::zero(); n * k];
    for i in 0..n {
        let row = &logits[i * k..][..k];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let out = &mut p[i * k..][..k];
        let mut z = T::zero();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - max).exp();
            z += *o;
        }
        for o in out.iter_mut() {
            *o = *o / z;
        }
    }
    p
}

/// Mean negative log-likelihood of `labels` under row-wise softmax.
pub fn cross_entropy_forward<T: Scalar>(logits: &[T], labels: &[usize], k: usize) -> T {
    let n = labels.len();
    let mut total = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * k..][..k];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        total += lse - row[y];
    }
    total / T::of(n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 23) as f64 - 11.0) * scale).collect()
    }

    fn direct_conv(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut y = vec![0.0; g.batch * g.out_ch * g.out_h * g.out_w];
        for n in 0..g.batch {
            for co in 0..g.out_ch {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = b[co];
                        for ci in 0..g.in_ch {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                        continue;
                                    }
                                    let xi = ((n * g.in_ch + ci) * g.in_h + iy as usize) * g.in_w + ix as usize;
                                    let wi = ((co * g.in_ch + ci) * g.kernel + ky) * g.kernel + kx;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                        y[((n * g.out_ch + co) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn direct_conv_transpose(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let s = g.stride;
        let mut y = vec![0.0; g.batch * g.out_ch * g.out_h * g.out_w];
        for n in 0..g.batch {
            for co in 0..g.out_ch {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let (iy, ky, ix, kx) = (oy / s, oy % s, ox / s, ox % s);
                        let mut acc = b[co];
                        for ci in 0..g.in_ch {
                            acc += x[((n * g.in_ch + ci) * g.in_h + iy) * g.in_w + ix]
                                * w[((ci * g.out_ch + co) * s + ky) * s + kx];
                        }
                        y[((n * g.out_ch + co) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() < 1e-12, "{i}: {x} vs {y}");
        }
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (stride, pad, k, h, w) in [(1, 1, 3, 5, 6), (2, 0, 2, 6, 4), (2, 1, 3, 7, 5), (1, 0, 1, 3, 3)] {
            let g = ConvGeom::conv2d(&[2, 3, h, w], &[4, 3, k, k], &[4], stride, pad).unwrap();
            let x = seq(2 * 3 * h * w, 0.1);
            let wt = seq(4 * 3 * k * k, 0.07);
            let b = seq(4, 0.3);
            close(&conv2d_forward(&x, &wt, &b, &g), &direct_conv(&x, &wt, &b, &g));
        }
    }

    #[test]
    fn conv_transpose_matches_direct_loops() {
        for s in [1, 2, 3] {
            let g = ConvGeom::conv_transpose2d(&[2, 3, 2, 3], &[3, 4, s, s], &[4], s).unwrap();
            let x = seq(2 * 3 * 6, 0.1);
            let w = seq(3 * 4 * s * s, 0.05);
            let b = seq(4, 0.2);
            close(&conv_transpose2d_forward(&x, &w, &b, &g), &direct_conv_transpose(&x, &w, &b, &g));
        }
    }

    #[test]
    fn conv_backward_matches_adjoint_of_forward() {
        let g = ConvGeom::conv2d(&[2, 2, 5, 5], &[3, 2, 3, 3], &[3], 2, 1).unwrap();
        let x = seq(2 * 2 * 25, 0.1);
        let w = seq(3 * 2 * 9, 0.05);
        let zero = vec![0.0; 3];
        let gy = seq(2 * 3 * g.out_h * g.out_w, 0.03);
        let [gx, gw, gb] = conv2d_backward(&x, &w, &gy, &g, [true; 3]);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let lhs = dot(&conv2d_forward(&x, &w, &zero, &g), &gy);
        assert!((lhs - dot(&gx.unwrap(), &x)).abs() < 1e-12);
        assert!((lhs - dot(&gw.unwrap(), &w)).abs() < 1e-12);
        let ones = vec![1.0; 3];
        let bias_only = conv2d_forward(&vec![0.0; x.len()], &vec![0.0; w.len()], &ones, &g);
        assert!((dot(&bias_only, &gy) - gb.unwrap().iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn geometry_rejects_bad_shapes() {
        assert!(ConvGeom::conv2d(&[1, 3, 4, 4], &[2, 2, 3, 3], &[2], 1, 0).is_err());
        assert!(ConvGeom::conv2d(&[1, 3, 4, 4], &[2, 3, 3, 3], &[3], 1, 0).is_err());
        assert!(ConvGeom::conv2d(&[1, 3, 2, 2], &[2, 3, 5, 5], &[2], 1, 0).is_err());
        assert!(ConvGeom::conv2d(&[1, 3, 4, 4], &[2, 3, 3, 3], &[2], 0, 0).is_err());
        assert!(ConvGeom::conv_transpose2d(&[1, 3, 4, 4], &[3, 2, 3, 3], &[2], 2).is_err());
    }

    #[test]
    fn pooling_and_norm_small_cases() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        assert_eq!(avg_pool2_forward(&x, 1, 2, 4), vec![3.5, 5.5]);
        assert_eq!(avg_pool2_backward(&[4.0, 8.0], 1, 2, 4), vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let (y, inv) = instance_norm_forward(&[1.0, 3.0, 5.0, 7.0], 1, 4);
        let var: f64 = 5.0;
        assert!((inv[0] - 1.0 / (var + 1e-5).sqrt()).abs() < 1e-12);
        assert!(y.iter().sum::<f64>().abs() < 1e-12);
        assert!((y[3] - 3.0 * inv[0]).abs() < 1e-12);
    }

    #[test]
    fn softmax_and_cross_entropy() {
        let p = softmax_rows(&[0.0, 0.0, 1000.0, 1000.0], 2, 2);
        assert_eq!(p, vec![0.5; 4]);
        let ce = cross_entropy_forward(&[0.0f64, 0.0, 0.0], &[1], 3);
        assert!((ce - 3f64.ln()).abs() < 1e-15);
        assert!(sigmoid(1e4f64).is_finite() && sigmoid(-1e4f64).is_finite());
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn linear_matches_hand_values() {
        let y = linear_forward(&[1.0, 2.0], &[3.0, 4.0, -1.0, 0.5], &[0.5, 0.0], 1, 2, 2);
        assert_eq!(y, vec![11.5, 0.0]);
        let [gx, gw, gb] = linear_backward(&[1.0, 2.0], &[3.0, 4.0, -1.0, 0.5], &[1.0, 2.0], 1, 2, 2, [true; 3]);
        assert_eq!(gx.unwrap(), vec![1.0, 5.0]);
        assert_eq!(gw.unwrap(), vec![1.0, 2.0, 2.0, 4.0]);
        assert_eq!(gb.unwrap(), vec![1.0, 2.0]);
    }
}
