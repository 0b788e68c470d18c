//! Concatenation baseline: all raw features side by side, reduced to `d` by a
//! GeLU perceptron. Needs a fixed feature layout.

use alloc::{format, string::String, vec::Vec};

use super::bundle::{flat_width, FamilySchema, FeatureBundle};
use crate::numerics::{l2_normalize, Matrix, Mlp, MlpCache, Parameters};
use crate::rng::Stream;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BaselineMixerParams {
    pub schema: Vec<FamilySchema>,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct BaselineTrace {
    cache: MlpCache,
}

impl BaselineMixerParams {
    /// `hidden` lists the inner widths; `[2 * dim]` gives in → 2d → d.
    pub fn init(schema: &[FamilySchema], hidden: &[usize], dim: usize, rng: &mut Stream) -> Result<Self> {
        let mut widths = alloc::vec![flat_width(schema)];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        Ok(BaselineMixerParams {
            schema: schema.to_vec(),
            mlp: Mlp::init(&widths, rng)?,
        })
    }

    pub fn from_mlp(schema: &[FamilySchema], mlp: Mlp) -> Result<Self> {
        if mlp.input_width() != flat_width(schema) {
            return Err(Error::Schema(format!(
                "perceptron fan-in {} for feature width {}",
                mlp.input_width(),
                flat_width(schema)
            )));
        }
        Ok(BaselineMixerParams {
            schema: schema.to_vec(),
            mlp,
        })
    }

    pub fn zeros_like(&self) -> Self {
        BaselineMixerParams {
            schema: self.schema.clone(),
            mlp: self.mlp.zeros_like(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mlp.output_width()
    }

    pub fn forward_traced(&self, bundle: &FeatureBundle) -> Result<(Vec<f64>, BaselineTrace)> {
        bundle.conforms(&self.schema)?;
        let x = Matrix::row_vector(&bundle.flatten());
        let (y, cache) = self.mlp.forward_cached(&x)?;
        Ok((y.into_vec(), BaselineTrace { cache }))
    }

    pub fn backward(&self, trace: &BaselineTrace, upstream: &[f64], grad: &mut BaselineMixerParams) -> Vec<f64> {
        self.mlp
            .backward(&trace.cache, &Matrix::row_vector(upstream), &mut grad.mlp)
            .into_vec()
    }

    pub fn embed(&self, bundle: &FeatureBundle) -> Result<Vec<f64>> {
        l2_normalize(&self.forward_traced(bundle)?.0)
    }
}

impl Parameters for BaselineMixerParams {
    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        self.mlp
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (format!("mlp.{n}"), t))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.mlp.tensors_mut()
    }
}

pub fn baseline_forward(bundle: &FeatureBundle, params: &BaselineMixerParams) -> Result<Vec<f64>> {
    params.embed(bundle)
}
