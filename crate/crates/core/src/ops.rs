//! Forward kernels on raw buffers, plus value-level wrappers over [`Tensor`].
//!
//! The recording [`Tape`](crate::tape::Tape) calls the same kernels, so an
//! eager call and its taped counterpart produce bit-identical values.

use std::f64::consts::{FRAC_2_SQRT_PI, SQRT_2};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// GELU flavour. `Tanh` uses the usual cubic approximation
/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`; `Erf` is `x·Φ(x)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GeluKind {
    #[default]
    Tanh,
    Erf,
}

pub(crate) const GELU_COEFF: f64 = 0.044_715;
// √(2/π)
pub(crate) const GELU_SCALE: f64 = FRAC_2_SQRT_PI / SQRT_2;

/// `c[p×s] = a[p×q] · b[q×s]`; sums run over `q` in ascending order.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], p: usize, q: usize, s: usize) -> Vec<f64> {
    let mut c = vec![0.0; p * s];
    for i in 0..p {
        let row = &mut c[i * s..(i + 1) * s];
        for k in 0..q {
            let aik = a[i * q + k];
            let brow = &b[k * s..(k + 1) * s];
            for (cj, bj) in row.iter_mut().zip(brow) {
                *cj += aik * bj;
            }
        }
    }
    c
}

/// `aᵀ · b` for `a[q×p]`, `b[q×s]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], q: usize, p: usize, s: usize) -> Vec<f64> {
    let mut c = vec![0.0; p * s];
    for k in 0..q {
        let brow = &b[k * s..(k + 1) * s];
        for i in 0..p {
            let aki = a[k * p + i];
            let row = &mut c[i * s..(i + 1) * s];
            for (cj, bj) in row.iter_mut().zip(brow) {
                *cj += aki * bj;
            }
        }
    }
    c
}

/// `a · bᵀ` for `a[p×q]`, `b[s×q]`; same summation order as [`matmul_kernel`].
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], p: usize, q: usize, s: usize) -> Vec<f64> {
    matmul_kernel(a, &transpose_kernel(b, 1, s, q), p, q, s)
}

pub(crate) fn transpose_kernel(a: &[f64], batch: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for b in 0..batch {
        let src = &a[b * p * q..(b + 1) * p * q];
        let dst = &mut out[b * p * q..(b + 1) * p * q];
        for i in 0..p {
            for j in 0..q {
                dst[j * p + i] = src[i * q + j];
            }
        }
    }
    out
}

/// Same-size cross-correlation with zero padding `(k-1)/2`, no bias.
///
/// `x` is `[cin×h×w]`, `w` is `[cout×cin×k×k]`. Each output accumulates its
/// terms in `(ci, ky, kx)` order.
pub(crate) fn conv2d_kernel(
    x: &[f64],
    w: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    k: usize,
) -> Vec<f64> {
    let hw = h * wd;
    if k == 1 {
        return matmul_kernel(w, x, cout, cin, hw);
    }
    let pad = (k - 1) / 2;
    let mut out = vec![0.0; cout * hw];
    for co in 0..cout {
        let dst = &mut out[co * hw..(co + 1) * hw];
        for ci in 0..cin {
            let src = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((co * cin + ci) * k + ky) * k + kx];
                    let (y0, y1) = valid_range(ky, pad, h);
                    let (x0, x1) = valid_range(kx, pad, wd);
                    for y in y0..y1 {
                        let sy = y + ky - pad;
                        let drow = &mut dst[y * wd + x0..y * wd + x1];
                        let srow = &src[sy * wd + x0 + kx - pad..sy * wd + x1 + kx - pad];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output rows `y` for which `y + tap - pad` lies in `[0, n)`.
#[inline]
pub(crate) fn valid_range(tap: usize, pad: usize, n: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(tap);
    let hi = (n + pad).saturating_sub(tap).min(n);
    (lo, hi.max(lo))
}

/// Softmax over the last axis of a buffer viewed as `rows × cols`.
pub(crate) fn softmax_kernel(a: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for (src, dst) in a.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

/// Largest `f64` below one.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function clamped to the open interval `(0, 1)`.
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, BELOW_ONE)
}

pub(crate) fn gelu_scalar(x: f64, kind: GeluKind) -> f64 {
    match kind {
        GeluKind::Tanh => 0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_COEFF * x * x * x)).tanh()),
        GeluKind::Erf => 0.5 * x * (1.0 + libm::erf(x / SQRT_2)),
    }
}

pub(crate) fn gelu_derivative(x: f64, kind: GeluKind) -> f64 {
    match kind {
        GeluKind::Tanh => {
            let t = (GELU_SCALE * (x + GELU_COEFF * x * x * x)).tanh();
            0.5 * (1.0 + t)
                + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_COEFF * x * x)
        }
        GeluKind::Erf => {
            let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
            let pdf = (-0.5 * x * x).exp() * FRAC_2_SQRT_PI / (2.0 * SQRT_2);
            cdf + x * pdf
        }
    }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::invalid(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

pub(crate) fn check_matmul(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (a, b) {
        (&[p, q], &[q2, s]) if q == q2 => Ok((p, q, s)),
        _ => Err(Error::shape("matmul", a, b)),
    }
}

pub(crate) fn check_conv(x: &[usize], w: &[usize]) -> Result<(usize, usize, usize, usize, usize)> {
    let (&[cin, h, wd], &[cout, cin_w, k, k2]) = (x, w) else {
        return Err(Error::shape("conv2d", x, w));
    };
    if cin != cin_w {
        return Err(Error::invalid(
            "conv2d",
            format!("input has {cin} channels but weight {w:?} expects {cin_w}"),
        ));
    }
    if k != k2 || k % 2 == 0 {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel must be square with odd size, got {k}×{k2}"),
        ));
    }
    Ok((cin, cout, h, wd, k))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (p, q, s) = check_matmul(a.shape(), b.shape())?;
    Ok(Tensor::from_parts(
        vec![p, s],
        matmul_kernel(a.data(), b.data(), p, q, s),
    ))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    expect_rank("transpose", a, 2)?;
    let (p, q) = (a.shape()[0], a.shape()[1]);
    Ok(Tensor::from_parts(
        vec![q, p],
        transpose_kernel(a.data(), 1, p, q),
    ))
}

/// Same-size 2-D convolution of `x[cin×h×w]` with `w[cout×cin×k×k]`.
pub fn conv2d(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (cin, cout, h, wd, k) = check_conv(x.shape(), w.shape())?;
    Ok(Tensor::from_parts(
        vec![cout, h, wd],
        conv2d_kernel(x.data(), w.data(), cin, cout, h, wd, k),
    ))
}

/// Row-wise softmax of a matrix (or of the last axis of a higher-rank tensor).
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    if a.rank() == 0 {
        return Err(Error::invalid("softmax_rows", "scalar input"));
    }
    let cols = *a.shape().last().unwrap();
    Ok(Tensor::from_parts(
        a.shape().to_vec(),
        softmax_kernel(a.data(), cols),
    ))
}

pub fn gelu(x: &Tensor, kind: GeluKind) -> Tensor {
    x.map(|v| gelu_scalar(v, kind))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("hadamard", a.shape(), b.shape()));
    }
    Ok(Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
    ))
}
