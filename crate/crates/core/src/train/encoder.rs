use alloc::{string::String, vec::Vec};

use crate::numerics::graph::{check_upstream, grads_from, Differentiable, LayerGrads};
use crate::numerics::{l2_normalize, Matrix, Mlp, MlpCache, Parameters};
use crate::rng::Stream;
use crate::{Error, Result};

/// Query-side network: query view → GeLU hidden layer → linear whitening to
/// `d`. Kept much smaller than the mixer.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QueryEncoder {
    pub mlp: Mlp,
}

impl QueryEncoder {
    pub fn init(input: usize, hidden: usize, dim: usize, rng: &mut Stream) -> Result<Self> {
        Ok(QueryEncoder {
            mlp: Mlp::init(&[input, hidden, dim], rng)?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        QueryEncoder {
            mlp: self.mlp.zeros_like(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_width()
    }

    pub fn dim(&self) -> usize {
        self.mlp.output_width()
    }

    pub fn forward_traced(&self, view: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        let (y, cache) = self.mlp.forward_cached(&Matrix::row_vector(view))?;
        Ok((y.into_vec(), cache))
    }

    pub fn backward(&self, cache: &MlpCache, upstream: &[f64], grad: &mut QueryEncoder) -> Vec<f64> {
        self.mlp
            .backward(cache, &Matrix::row_vector(upstream), &mut grad.mlp)
            .into_vec()
    }

    pub fn embed(&self, view: &[f64]) -> Result<Vec<f64>> {
        l2_normalize(&self.forward_traced(view)?.0)
    }
}

impl Parameters for QueryEncoder {
    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        self.mlp.named_tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.mlp.tensors_mut()
    }
}

pub struct EncoderGraph {
    pub encoder: QueryEncoder,
    cache: Option<MlpCache>,
}

impl EncoderGraph {
    pub fn new(encoder: QueryEncoder) -> Self {
        EncoderGraph { encoder, cache: None }
    }
}

impl Differentiable for EncoderGraph {
    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let (y, cache) = self.encoder.mlp.forward_cached(x)?;
        self.cache = Some(cache);
        Ok(y)
    }

    fn backward(&mut self, upstream: &Matrix) -> Result<LayerGrads> {
        let cache = self.cache.as_ref().ok_or(Error::State("EncoderGraph"))?;
        check_upstream("EncoderGraph::backward", (cache.rows(), self.encoder.dim()), upstream)?;
        let mut g = self.encoder.zeros_like();
        let dx = self.encoder.mlp.backward(cache, upstream, &mut g.mlp);
        Ok(grads_from(&g, dx))
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.encoder.tensors_mut()
    }
}
