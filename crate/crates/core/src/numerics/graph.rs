//! Stateful layer wrappers that record their forward pass.

use alloc::{string::String, vec::Vec};

use super::attention::{mhsa_backward, mhsa_forward, AttentionCache, AttentionParams};
use super::dense::Dense;
use super::matrix::Matrix;
use super::ops::{
    gelu, gelu_backward, layer_norm_backward, layer_norm_forward, softmax_rows,
    softmax_rows_backward, LayerNormCache, LayerNormParams,
};
use super::Parameters;
use crate::{Error, Result};

/// Gradients from one backward pass: one entry per parameter, same shapes and
/// order as [`Differentiable::params_mut`], plus the gradient of the input.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub params: Vec<(String, Matrix)>,
    pub input: Matrix,
}

impl LayerGrads {
    pub fn param(&self, name: &str) -> Option<&Matrix> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }
}

/// A layer with a recorded forward pass and an exact backward pass.
pub trait Differentiable {
    fn forward(&mut self, x: &Matrix) -> Result<Matrix>;

    /// Gradients of `Σ upstream ⊙ output` for the most recent forward input.
    fn backward(&mut self, upstream: &Matrix) -> Result<LayerGrads>;

    fn params_mut(&mut self) -> Vec<&mut Matrix>;
}

pub(crate) fn grads_from<P: Parameters>(p: &P, input: Matrix) -> LayerGrads {
    LayerGrads {
        params: p
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect(),
        input,
    }
}

pub(crate) fn check_upstream(op: &'static str, out: (usize, usize), upstream: &Matrix) -> Result<()> {
    if upstream.shape() != out {
        return Err(crate::Error::dim(
            op,
            alloc::format!("upstream {:?} for output {:?}", upstream.shape(), out),
        ));
    }
    Ok(())
}

pub struct Linear {
    pub layer: Dense,
    input: Option<Matrix>,
}

impl Linear {
    pub fn new(layer: Dense) -> Self {
        Linear { layer, input: None }
    }
}

impl Differentiable for Linear {
    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let y = self.layer.forward(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, upstream: &Matrix) -> Result<LayerGrads> {
        let x = self.input.as_ref().ok_or(Error::State("Linear"))?;
        check_upstream("Linear::backward", (x.rows(), self.layer.fan_out()), upstream)?;
        let mut g = Dense::zeros(self.layer.fan_in(), self.layer.fan_out());
        let dx = self.layer.backward(x, upstream, &mut g);
        Ok(grads_from(&g, dx))
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layer.tensors_mut()
    }
}

pub struct LayerNorm {
    pub params: LayerNormParams,
    cache: Option<LayerNormCache>,
}

impl LayerNorm {
    pub fn new(params: LayerNormParams) -> Self {
        LayerNorm { params, cache: None }
    }
}

impl Differentiable for LayerNorm {
    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        super::ops::layer_norm(x, self.params.gain.as_slice(), self.params.bias.as_slice())?;
        let (y, cache) = layer_norm_forward(x, self.params.gain.as_slice(), self.params.bias.as_slice());
        self.cache = Some(cache);
        Ok(y)
    }

    fn backward(&mut self, upstream: &Matrix) -> Result<LayerGrads> {
        let cache = self.cache.as_ref().ok_or(Error::State("LayerNorm"))?;
        if upstream.cols() != self.params.gain.cols() {
            return Err(Error::dim("LayerNorm::backward", "upstream width"));
        }
        let mut g = self.params.zeros_like();
        let dx = layer_norm_backward(cache, self.params.gain.as_slice(), upstream, &mut g);
        Ok(grads_from(&g, dx))
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.params.tensors_mut()
    }
}

#[derive(Default)]
pub struct Gelu {
    input: Option<Matrix>,
}

impl Differentiable for Gelu {
    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        self.input = Some(x.clone());
        Ok(gelu(x))
    }

    fn backward(&mut self, upstream: &Matrix) -> Result<LayerGrads> {
        let x = self.input.as_ref().ok_or(Error::State("Gelu"))?;
        check_upstream("Gelu::backward", x.shape(), upstream)?;
        Ok(LayerGrads {
            params: Vec::new(),
            input: gelu_backward(x, upstream),
        })
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        Vec::new()
    }
}

#[derive(Default)]
pub struct Softmax {
    output: Option<Matrix>,
}

impl Differentiable for Softmax {
    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let y = softmax_rows(x);
        self.output = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, upstream: &Matrix) -> Result<LayerGrads> {
        let y = self.output.as_ref().ok_or(Error::State("Softmax"))?;
        check_upstream("Softmax::backward", y.shape(), upstream)?;
        Ok(LayerGrads {
            params: Vec::new(),
            input: softmax_rows_backward(y, upstream),
        })
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        Vec::new()
    }
}

pub struct SelfAttention {
    pub params: AttentionParams,
    pub heads: usize,
    cache: Option<AttentionCache>,
}

impl SelfAttention {
    pub fn new(params: AttentionParams, heads: usize) -> Self {
        SelfAttention {
            params,
            heads,
            cache: None,
        }
    }
}

impl Differentiable for SelfAttention {
    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let (y, cache) = mhsa_forward(x, &self.params, self.heads)?;
        self.cache = Some(cache);
        Ok(y)
    }

    fn backward(&mut self, upstream: &Matrix) -> Result<LayerGrads> {
        let cache = self.cache.as_ref().ok_or(Error::State("SelfAttention"))?;
        if upstream.cols() != self.params.dim() {
            return Err(Error::dim("SelfAttention::backward", "upstream width"));
        }
        let mut g = AttentionParams::zeros(self.params.dim());
        let dx = mhsa_backward(&self.params, cache, upstream, &mut g);
        Ok(grads_from(&g, dx))
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.params.tensors_mut()
    }
}
