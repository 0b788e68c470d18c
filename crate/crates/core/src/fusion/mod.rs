//! Feature bundles and the two gallery-side aggregators: the transformer
//! mixer and the concatenation baseline.

mod baseline;
mod bundle;
mod mixer;
#[cfg(test)]
mod tests;

use alloc::{string::String, vec::Vec};

pub use baseline::{baseline_forward, BaselineMixerParams, BaselineTrace};
pub use bundle::{
    flat_width, project_and_stack, stacking_order, token_count, FamilyKind, FamilySchema,
    FeatureBundle, FeatureSequence, ProjectionSet,
};
pub use mixer::{mixer_forward, MixerConfig, MixerParams, MixerTrace, TransformerLayer};

use crate::numerics::graph::{check_upstream, Differentiable, LayerGrads};
use crate::numerics::{l2_normalize, Matrix, Parameters};
use crate::{Error, Result};

/// The trainable gallery-side aggregator.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum GalleryModel {
    Transformer(MixerParams),
    Mlp(BaselineMixerParams),
}

#[derive(Clone, Debug)]
pub enum GalleryTrace {
    Transformer(MixerTrace),
    Mlp(BaselineTrace),
}

impl GalleryModel {
    pub fn dim(&self) -> usize {
        match self {
            GalleryModel::Transformer(p) => p.config.dim,
            GalleryModel::Mlp(p) => p.dim(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GalleryModel::Transformer(_) => "transformer-mixer",
            GalleryModel::Mlp(_) => "mlp-mixer",
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            GalleryModel::Transformer(p) => GalleryModel::Transformer(p.zeros_like()),
            GalleryModel::Mlp(p) => GalleryModel::Mlp(p.zeros_like()),
        }
    }

    /// Unnormalized aggregated feature plus the trace for backward.
    pub fn forward_traced(&self, bundle: &FeatureBundle) -> Result<(Vec<f64>, GalleryTrace)> {
        match self {
            GalleryModel::Transformer(p) => {
                let (y, t) = p.forward_traced(bundle)?;
                Ok((y, GalleryTrace::Transformer(t)))
            }
            GalleryModel::Mlp(p) => {
                let (y, t) = p.forward_traced(bundle)?;
                Ok((y, GalleryTrace::Mlp(t)))
            }
        }
    }

    /// Accumulates into `grad` (which must be the same variant) and returns
    /// the raw-feature gradient.
    pub fn backward(&self, trace: &GalleryTrace, upstream: &[f64], grad: &mut GalleryModel) -> Vec<f64> {
        match (self, trace, grad) {
            (GalleryModel::Transformer(p), GalleryTrace::Transformer(t), GalleryModel::Transformer(g)) => {
                p.backward(t, upstream, g)
            }
            (GalleryModel::Mlp(p), GalleryTrace::Mlp(t), GalleryModel::Mlp(g)) => p.backward(t, upstream, g),
            _ => panic!("gallery model, trace and gradient variants differ"),
        }
    }

    /// L2-normalized embedding used for retrieval.
    pub fn embed(&self, bundle: &FeatureBundle) -> Result<Vec<f64>> {
        l2_normalize(&self.forward_traced(bundle)?.0)
    }
}

impl Parameters for GalleryModel {
    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        match self {
            GalleryModel::Transformer(p) => p.named_tensors(),
            GalleryModel::Mlp(p) => p.named_tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            GalleryModel::Transformer(p) => p.tensors_mut(),
            GalleryModel::Mlp(p) => p.tensors_mut(),
        }
    }
}

/// Differentiable view of a gallery model: the input is a `1 × W` row of raw
/// features flattened in stacking order, the output the `1 × d` unnormalized
/// aggregated feature.
pub struct GalleryGraph {
    pub model: GalleryModel,
    pub schema: Vec<FamilySchema>,
    trace: Option<GalleryTrace>,
}

impl GalleryGraph {
    pub fn new(model: GalleryModel, schema: &[FamilySchema]) -> Self {
        GalleryGraph {
            model,
            schema: schema.to_vec(),
            trace: None,
        }
    }
}

impl Differentiable for GalleryGraph {
    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != 1 {
            return Err(Error::dim("GalleryGraph::forward", "expects a single flattened row"));
        }
        let bundle = FeatureBundle::from_flat(&self.schema, x.as_slice(), 0, None)?;
        let (y, trace) = self.model.forward_traced(&bundle)?;
        self.trace = Some(trace);
        Ok(Matrix::row_vector(&y))
    }

    fn backward(&mut self, upstream: &Matrix) -> Result<LayerGrads> {
        let trace = self.trace.as_ref().ok_or(Error::State("GalleryGraph"))?;
        check_upstream("GalleryGraph::backward", (1, self.model.dim()), upstream)?;
        let mut g = self.model.zeros_like();
        let dx = self.model.backward(trace, upstream.as_slice(), &mut g);
        Ok(crate::numerics::graph::grads_from(&g, Matrix::row_vector(&dx)))
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.model.tensors_mut()
    }
}
