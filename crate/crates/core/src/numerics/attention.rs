//! Multi-head self-attention without positional information.

use alloc::{format, vec::Vec};

use super::matrix::Matrix;
use super::ops::{softmax_rows, softmax_rows_backward};
use crate::rng::{self, Stream};
use crate::{Error, Result};

/// Query, key, value and output projections, each `d × d`, no biases.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttentionParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

impl AttentionParams {
    pub fn init(dim: usize, rng: &mut Stream) -> Self {
        let std = 1.0 / libm::sqrt(dim as f64);
        AttentionParams {
            wq: rng::normal_matrix(rng, dim, dim, std),
            wk: rng::normal_matrix(rng, dim, dim, std),
            wv: rng::normal_matrix(rng, dim, dim, std),
            wo: rng::normal_matrix(rng, dim, dim, std),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        AttentionParams {
            wq: Matrix::zeros(dim, dim),
            wk: Matrix::zeros(dim, dim),
            wv: Matrix::zeros(dim, dim),
            wo: Matrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    mixed: Matrix,
    heads: usize,
}

pub fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "width {dim} is not divisible by {heads} attention heads"
        )));
    }
    Ok(())
}

pub fn mhsa(x: &Matrix, params: &AttentionParams, heads: usize) -> Result<Matrix> {
    Ok(mhsa_forward(x, params, heads)?.0)
}

pub(crate) fn mhsa_forward(
    x: &Matrix,
    params: &AttentionParams,
    heads: usize,
) -> Result<(Matrix, AttentionCache)> {
    let d = params.dim();
    if x.cols() != d {
        return Err(Error::dim(
            "mhsa",
            format!("input width {} for attention width {d}", x.cols()),
        ));
    }
    check_heads(d, heads)?;
    let dh = d / heads;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let q = x.mm(&params.wq);
    let k = x.mm(&params.wk);
    let v = x.mm(&params.wv);
    let mut mixed = Matrix::zeros(x.rows(), d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.col_block(h * dh, dh);
        let kh = k.col_block(h * dh, dh);
        let vh = v.col_block(h * dh, dh);
        let mut scores = qh.mm_nt(&kh);
        scores.scale(scale);
        let p = softmax_rows(&scores);
        mixed.set_col_block(h * dh, &p.mm(&vh));
        probs.push(p);
    }
    let out = mixed.mm(&params.wo);
    Ok((
        out,
        AttentionCache {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            mixed,
            heads,
        },
    ))
}

/// Accumulates parameter gradients into `grad` and returns the input gradient.
pub(crate) fn mhsa_backward(
    params: &AttentionParams,
    cache: &AttentionCache,
    upstream: &Matrix,
    grad: &mut AttentionParams,
) -> Matrix {
    let d = params.dim();
    let dh = d / cache.heads;
    let scale = 1.0 / libm::sqrt(dh as f64);
    grad.wo.add_assign(&cache.mixed.mm_tn(upstream));
    let dmixed = upstream.mm_nt(&params.wo);
    let n = cache.x.rows();
    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    for h in 0..cache.heads {
        let p = &cache.probs[h];
        let qh = cache.q.col_block(h * dh, dh);
        let kh = cache.k.col_block(h * dh, dh);
        let vh = cache.v.col_block(h * dh, dh);
        let dout = dmixed.col_block(h * dh, dh);
        let dp = dout.mm_nt(&vh);
        dv.set_col_block(h * dh, &p.mm_tn(&dout));
        let mut ds = softmax_rows_backward(p, &dp);
        ds.scale(scale);
        dq.set_col_block(h * dh, &ds.mm(&kh));
        dk.set_col_block(h * dh, &ds.mm_tn(&qh));
    }
    grad.wq.add_assign(&cache.x.mm_tn(&dq));
    grad.wk.add_assign(&cache.x.mm_tn(&dk));
    grad.wv.add_assign(&cache.x.mm_tn(&dv));
    let mut dx = dq.mm_nt(&params.wq);
    dx.add_assign(&dk.mm_nt(&params.wk));
    dx.add_assign(&dv.mm_nt(&params.wv));
    dx
}
