//! 1-D network primitives with explicit forward/backward passes.
//!
//! Everything here works on one item at a time: signals are `[channels x
//! time]` matrices. Convolutions are im2col + matrix multiply, so stride and
//! padding land in the column gather and the hot loops are plain GEMMs.
//! Layers are generic over the compute scalar so the same code runs the
//! full-precision (f64) and mixed-precision (f32) paths.

use ndarray::{Array1, Array2, LinalgScalar, ScalarOperand};
use num_traits::Float;

/// Compute scalar for network arithmetic (f32 or f64).
pub trait Scalar:
    Float + LinalgScalar + ScalarOperand + Send + Sync + std::fmt::Debug + std::iter::Sum + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Variance floor inside channel normalization.
pub const NORM_EPS: f64 = 1e-5;

// ── parameters ──────────────────────────────────────────────────────────────

/// Convolution weights plus geometry. The weight matrix is stored flattened
/// as `[out_ch x (in_ch * kernel)]` so forward/backward are single GEMMs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub in_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        ConvParams {
            weight: Array2::zeros((out_ch, in_ch * kernel)),
            bias: Array1::zeros(out_ch),
            in_ch,
            kernel,
            stride,
        }
    }

    pub fn out_ch(&self) -> usize {
        self.weight.nrows()
    }
}

/// Per-channel affine for channel normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

impl<T: Scalar> NormParams<T> {
    pub fn identity(ch: usize) -> Self {
        NormParams {
            gamma: Array1::from_elem(ch, T::one()),
            beta: Array1::zeros(ch),
        }
    }

    pub fn zeros(ch: usize) -> Self {
        NormParams {
            gamma: Array1::zeros(ch),
            beta: Array1::zeros(ch),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<T> {
    /// `[out x in]`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> LinearParams<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LinearParams {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }
}

// ── convolution ─────────────────────────────────────────────────────────────

/// Output length of a same-padded strided conv: ceil(t / stride).
pub fn conv_out_len(t: usize, stride: usize) -> usize {
    t.div_ceil(stride)
}

/// Gather `[in_ch * kernel x t_out]` columns with zero padding of (k-1)/2.
fn im2col<T: Scalar>(x: &Array2<T>, kernel: usize, stride: usize) -> Array2<T> {
    let (in_ch, t_in) = x.dim();
    let pad = (kernel - 1) / 2;
    let t_out = conv_out_len(t_in, stride);
    let mut cols = Array2::<T>::zeros((in_ch * kernel, t_out));
    for c in 0..in_ch {
        let row = x.row(c);
        let src = row.as_slice().expect("row-major input");
        for k in 0..kernel {
            // valid j satisfy 0 <= j*stride + k - pad < t_in
            let lo = pad.saturating_sub(k).div_ceil(stride);
            let hi = if t_in + pad > k {
                (((t_in + pad - k - 1) / stride) + 1).min(t_out)
            } else {
                0
            };
            let mut dst_row = cols.row_mut(c * kernel + k);
            let dst = dst_row.as_slice_mut().expect("row-major cols");
            for j in lo..hi {
                dst[j] = src[j * stride + k - pad];
            }
        }
    }
    cols
}

/// Scatter-add the transpose of `im2col`: accumulate column gradients back
/// onto the input signal.
fn col2im_add<T: Scalar>(
    d_cols: &Array2<T>,
    kernel: usize,
    stride: usize,
    d_x: &mut Array2<T>,
) {
    let (in_ch, t_in) = d_x.dim();
    let pad = (kernel - 1) / 2;
    let t_out = d_cols.ncols();
    for c in 0..in_ch {
        let mut dst_row = d_x.row_mut(c);
        let dst = dst_row.as_slice_mut().expect("row-major grad");
        for k in 0..kernel {
            let src_row = d_cols.row(c * kernel + k);
            let src = src_row.as_slice().expect("row-major cols");
            let lo = pad.saturating_sub(k).div_ceil(stride);
            let hi = if t_in + pad > k {
                (((t_in + pad - k - 1) / stride) + 1).min(t_out)
            } else {
                0
            };
            for j in lo..hi {
                dst[j * stride + k - pad] = dst[j * stride + k - pad] + src[j];
            }
        }
    }
}

/// `[out_ch x t_out] = W * im2col(x) + bias`.
pub fn conv_forward<T: Scalar>(p: &ConvParams<T>, x: &Array2<T>) -> Array2<T> {
    debug_assert_eq!(x.nrows(), p.in_ch);
    let cols = im2col(x, p.kernel, p.stride);
    let mut out = p.weight.dot(&cols);
    for (mut row, &b) in out.rows_mut().into_iter().zip(p.bias.iter()) {
        row.mapv_inplace(|v| v + b);
    }
    out
}

/// Backprop one conv. Accumulates into `grad` and returns d_input.
pub fn conv_backward<T: Scalar>(
    p: &ConvParams<T>,
    grad: &mut ConvParams<T>,
    x: &Array2<T>,
    d_out: &Array2<T>,
) -> Array2<T> {
    let cols = im2col(x, p.kernel, p.stride);
    grad.weight = &grad.weight + &d_out.dot(&cols.t());
    grad.bias = &grad.bias + &d_out.sum_axis(ndarray::Axis(1));
    let d_cols = p.weight.t().dot(d_out);
    let mut d_x = Array2::<T>::zeros(x.dim());
    col2im_add(&d_cols, p.kernel, p.stride, &mut d_x);
    d_x
}

// ── channel normalization ───────────────────────────────────────────────────

/// Per-channel moments cached by the forward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub mean: Array1<T>,
    pub inv_std: Array1<T>,
}

/// Normalize each channel over time (per item), then apply the affine.
/// Batch-independent, so training, evaluation, and single-item gradient
/// checks all see the same function.
pub fn norm_forward<T: Scalar>(p: &NormParams<T>, x: &Array2<T>) -> (Array2<T>, NormCache<T>) {
    let (ch, t) = x.dim();
    let inv_t = T::from_f64(1.0 / t as f64);
    let eps = T::from_f64(NORM_EPS);
    let mut out = Array2::<T>::zeros((ch, t));
    let mut mean = Array1::<T>::zeros(ch);
    let mut inv_std = Array1::<T>::zeros(ch);
    for c in 0..ch {
        let row = x.row(c);
        let mu = row.iter().copied().sum::<T>() * inv_t;
        let var = row
            .iter()
            .map(|&v| {
                let d = v - mu;
                d * d
            })
            .sum::<T>()
            * inv_t;
        let is = (var + eps).sqrt().recip();
        mean[c] = mu;
        inv_std[c] = is;
        let g = p.gamma[c];
        let b = p.beta[c];
        for (o, &v) in out.row_mut(c).iter_mut().zip(row.iter()) {
            *o = g * ((v - mu) * is) + b;
        }
    }
    (out, NormCache { mean, inv_std })
}

pub fn norm_backward<T: Scalar>(
    p: &NormParams<T>,
    grad: &mut NormParams<T>,
    x: &Array2<T>,
    cache: &NormCache<T>,
    d_out: &Array2<T>,
) -> Array2<T> {
    let (ch, t) = x.dim();
    let inv_t = T::from_f64(1.0 / t as f64);
    let mut d_x = Array2::<T>::zeros((ch, t));
    for c in 0..ch {
        let mu = cache.mean[c];
        let is = cache.inv_std[c];
        let g = p.gamma[c];
        let xr = x.row(c);
        let dr = d_out.row(c);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for (&xv, &dv) in xr.iter().zip(dr.iter()) {
            let xhat = (xv - mu) * is;
            sum_dy = sum_dy + dv;
            sum_dy_xhat = sum_dy_xhat + dv * xhat;
        }
        grad.beta[c] = grad.beta[c] + sum_dy;
        grad.gamma[c] = grad.gamma[c] + sum_dy_xhat;
        let mean_dy = sum_dy * inv_t;
        let mean_dy_xhat = sum_dy_xhat * inv_t;
        for ((o, &xv), &dv) in d_x.row_mut(c).iter_mut().zip(xr.iter()).zip(dr.iter()) {
            let xhat = (xv - mu) * is;
            *o = g * is * (dv - mean_dy - xhat * mean_dy_xhat);
        }
    }
    d_x
}

// ── pointwise / pooling / head ──────────────────────────────────────────────

pub fn relu<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Mask by the cached post-relu output.
pub fn relu_backward<T: Scalar>(out: &Array2<T>, d_out: &Array2<T>) -> Array2<T> {
    let mut d = d_out.clone();
    d.zip_mut_with(out, |g, &o| {
        if o <= T::zero() {
            *g = T::zero();
        }
    });
    d
}

/// Global average pool over time: `[ch x t] -> [ch]`.
pub fn gap<T: Scalar>(x: &Array2<T>) -> Array1<T> {
    let inv_t = T::from_f64(1.0 / x.ncols() as f64);
    x.sum_axis(ndarray::Axis(1)) * inv_t
}

pub fn gap_backward<T: Scalar>(d_out: &Array1<T>, t: usize) -> Array2<T> {
    let inv_t = T::from_f64(1.0 / t as f64);
    let mut d = Array2::<T>::zeros((d_out.len(), t));
    for (mut row, &g) in d.rows_mut().into_iter().zip(d_out.iter()) {
        row.fill(g * inv_t);
    }
    d
}

pub fn linear_forward<T: Scalar>(p: &LinearParams<T>, x: &Array1<T>) -> Array1<T> {
    p.weight.dot(x) + &p.bias
}

pub fn linear_backward<T: Scalar>(
    p: &LinearParams<T>,
    grad: &mut LinearParams<T>,
    x: &Array1<T>,
    d_out: &Array1<T>,
) -> Array1<T> {
    for (mut gr, &g) in grad.weight.rows_mut().into_iter().zip(d_out.iter()) {
        gr.zip_mut_with(x, |w, &xv| *w = *w + g * xv);
    }
    grad.bias = &grad.bias + d_out;
    p.weight.t().dot(d_out)
}

/// Guard below which vectors are treated as zero-length for normalization.
pub const L2_EPS: f64 = 1e-12;

/// L2-normalize a vector; returns (normalized, norm used).
pub fn l2_normalize<T: Scalar>(x: &Array1<T>) -> (Array1<T>, T) {
    let norm = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    let n = norm.max(T::from_f64(L2_EPS));
    (x.mapv(|v| v / n), n)
}

/// d/dx of y = x / ||x||: (d_y - y * <y, d_y>) / ||x||.
pub fn l2_normalize_backward<T: Scalar>(y: &Array1<T>, norm: T, d_y: &Array1<T>) -> Array1<T> {
    let dot = y
        .iter()
        .zip(d_y.iter())
        .map(|(&a, &b)| a * b)
        .sum::<T>();
    let mut d = Array1::<T>::zeros(y.len());
    for ((o, &yv), &gv) in d.iter_mut().zip(y.iter()).zip(d_y.iter()) {
        *o = (gv - yv * dot) / norm;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_matches_direct_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (in_ch, out_ch, k, stride, t) = (3, 2, 5, 2, 11);
        let mut p = ConvParams::<f64>::zeros(in_ch, out_ch, k, stride);
        p.weight = rand_mat(&mut rng, out_ch, in_ch * k);
        p.bias = Array1::from_shape_fn(out_ch, |_| rng.gen_range(-0.5..0.5));
        let x = rand_mat(&mut rng, in_ch, t);
        let out = conv_forward(&p, &x);
        let pad = (k - 1) / 2;
        assert_eq!(out.dim(), (out_ch, conv_out_len(t, stride)));
        for oc in 0..out_ch {
            for j in 0..out.ncols() {
                let mut acc = p.bias[oc];
                for ic in 0..in_ch {
                    for kk in 0..k {
                        let idx = j * stride + kk;
                        if idx >= pad && idx - pad < t {
                            acc += p.weight[[oc, ic * k + kk]] * x[[ic, idx - pad]];
                        }
                    }
                }
                assert!((out[[oc, j]] - acc).abs() < 1e-12);
            }
        }
    }

    /// Central-difference check of the conv/norm/linear backward passes.
    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (in_ch, out_ch, k, stride, t) = (2, 3, 3, 2, 9);
        let mut p = ConvParams::<f64>::zeros(in_ch, out_ch, k, stride);
        p.weight = rand_mat(&mut rng, out_ch, in_ch * k);
        p.bias = Array1::from_shape_fn(out_ch, |_| rng.gen_range(-0.5..0.5));
        let x = rand_mat(&mut rng, in_ch, t);
        let norm = NormParams::<f64> {
            gamma: Array1::from_shape_fn(out_ch, |_| rng.gen_range(0.5..1.5)),
            beta: Array1::from_shape_fn(out_ch, |_| rng.gen_range(-0.5..0.5)),
        };
        // scalar loss: sum of squares of normalized conv output
        let loss = |p: &ConvParams<f64>, norm: &NormParams<f64>, x: &Array2<f64>| {
            let c = conv_forward(p, x);
            let (n, _) = norm_forward(norm, &c);
            n.iter().map(|&v| v * v).sum::<f64>()
        };
        let base_conv_out = conv_forward(&p, &x);
        let (n_out, n_cache) = norm_forward(&norm, &base_conv_out);
        let d_n = n_out.mapv(|v| 2.0 * v);
        let mut g_norm = NormParams::zeros(out_ch);
        let d_conv = norm_backward(&norm, &mut g_norm, &base_conv_out, &n_cache, &d_n);
        let mut g_conv = ConvParams::zeros(in_ch, out_ch, k, stride);
        let d_x = conv_backward(&p, &mut g_conv, &x, &d_conv);

        let h = 1e-5;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h);
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((analytic - fd) / denom).abs() < 1e-4,
                "analytic {analytic} vs fd {fd}"
            );
        };
        for idx in 0..p.weight.len() {
            let (mut pp, mut pm) = (p.clone(), p.clone());
            pp.weight.as_slice_mut().unwrap()[idx] += h;
            pm.weight.as_slice_mut().unwrap()[idx] -= h;
            check(
                g_conv.weight.as_slice().unwrap()[idx],
                loss(&pp, &norm, &x),
                loss(&pm, &norm, &x),
            );
        }
        for c in 0..out_ch {
            let (mut np, mut nm) = (norm.clone(), norm.clone());
            np.gamma[c] += h;
            nm.gamma[c] -= h;
            check(g_norm.gamma[c], loss(&p, &np, &x), loss(&p, &nm, &x));
        }
        for idx in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            check(
                d_x.as_slice().unwrap()[idx],
                loss(&p, &norm, &xp),
                loss(&p, &norm, &xm),
            );
        }
    }

    #[test]
    fn norm_output_is_standardized() {
        let p = NormParams::<f64>::identity(2);
        let x = array![[1.0, 2.0, 3.0, 4.0], [10.0, 10.0, 10.0, 10.0]];
        let (out, _) = norm_forward(&p, &x);
        let mean0: f64 = out.row(0).sum() / 4.0;
        let var0: f64 = out.row(0).iter().map(|v| (v - mean0).powi(2)).sum::<f64>() / 4.0;
        assert!(mean0.abs() < 1e-12);
        assert!((var0 - 1.0).abs() < 1e-4);
        // flat channel: finite output, zero after affine-identity
        assert!(out.row(1).iter().all(|v| v.is_finite() && v.abs() < 1e-6));
    }

    #[test]
    fn l2_normalize_unit_norm_and_gradient() {
        let x = array![3.0, 4.0];
        let (y, n) = l2_normalize(&x);
        assert!((n - 5.0).abs() < 1e-12);
        assert!((y.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        // gradient orthogonal to y
        let d_y = array![1.0, -2.0];
        let d_x = l2_normalize_backward(&y, n, &d_y);
        let dot: f64 = d_x.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-12);
    }
}
