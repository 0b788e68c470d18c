//! Elementwise and row-wise primitives with their vector-Jacobian products.

use alloc::{format, vec::Vec};

use super::matrix::{dot, norm, Matrix};
use crate::{Error, Result};

/// Norm below which a vector is treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// Stabilizer added to the variance inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > NORM_EPS) {
        return Err(Error::Degenerate("l2_normalize"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Gradient of `v / ‖v‖` given the upstream gradient of the output.
pub fn l2_normalize_backward(v: &[f64], upstream: &[f64]) -> Vec<f64> {
    let n = norm(v);
    let u: Vec<f64> = v.iter().map(|x| x / n).collect();
    let proj = dot(&u, upstream);
    upstream
        .iter()
        .zip(&u)
        .map(|(g, ui)| (g - ui * proj) / n)
        .collect()
}

/// Learnable affine part of a layer norm, stored as `1 × d` rows.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerNormParams {
    pub gain: Matrix,
    pub bias: Matrix,
}

impl LayerNormParams {
    pub fn new(dim: usize) -> Self {
        LayerNormParams {
            gain: Matrix::filled(1, dim, 1.0),
            bias: Matrix::zeros(1, dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        LayerNormParams {
            gain: Matrix::zeros(1, self.gain.cols()),
            bias: Matrix::zeros(1, self.bias.cols()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

pub fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64]) -> Result<Matrix> {
    if gain.len() != x.cols() || bias.len() != x.cols() {
        return Err(Error::dim(
            "layer_norm",
            format!(
                "gain/bias lengths {}/{} for {} columns",
                gain.len(),
                bias.len(),
                x.cols()
            ),
        ));
    }
    Ok(layer_norm_forward(x, gain, bias).0)
}

pub(crate) fn layer_norm_forward(x: &Matrix, gain: &[f64], bias: &[f64]) -> (Matrix, LayerNormCache) {
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    let mut normalized = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
        inv_std.push(is);
        let nrow = normalized.row_mut(r);
        for (n, v) in nrow.iter_mut().zip(row) {
            *n = (v - mean) * is;
        }
        let orow = out.row_mut(r);
        for c in 0..d {
            orow[c] = gain[c] * nrow[c] + bias[c];
        }
    }
    (out, LayerNormCache { normalized, inv_std })
}

pub(crate) fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &[f64],
    upstream: &Matrix,
    grad: &mut LayerNormParams,
) -> Matrix {
    let d = upstream.cols();
    let mut dx = Matrix::zeros(upstream.rows(), d);
    let dgain = grad.gain.as_mut_slice();
    let dbias = grad.bias.as_mut_slice();
    let mut dn = alloc::vec![0.0; d];
    for r in 0..upstream.rows() {
        let dy = upstream.row(r);
        let n = cache.normalized.row(r);
        for c in 0..d {
            dgain[c] += dy[c] * n[c];
            dbias[c] += dy[c];
            dn[c] = dy[c] * gain[c];
        }
        let mean_dn = dn.iter().sum::<f64>() / d as f64;
        let mean_dn_n = dot(&dn, n) / d as f64;
        let is = cache.inv_std[r];
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = is * (dn[c] - mean_dn - n[c] * mean_dn_n);
        }
    }
    dx
}

#[inline]
fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * libm::exp(-0.5 * x * x)
}

/// Exact (erf) GeLU.
pub fn gelu(x: &Matrix) -> Matrix {
    x.map(gelu_scalar)
}

pub fn gelu_backward(x: &Matrix, upstream: &Matrix) -> Matrix {
    let mut out = upstream.clone();
    for (o, &v) in out.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *o *= gelu_grad_scalar(v);
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Backward pass through a row softmax given its output `y`.
pub fn softmax_rows_backward(y: &Matrix, upstream: &Matrix) -> Matrix {
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let gr = upstream.row(r);
        let s = dot(yr, gr);
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = yr[c] * (gr[c] - s);
        }
    }
    dx
}
