//! Dense linear algebra and the fixed set of differentiable layers used by
//! the mixer, the query encoder and the ArcFace heads.
//!
//! Layers come in two flavours. The functional forms (`*_forward` returning a
//! cache, `*_backward` consuming it) are what the training code composes. The
//! stateful wrappers in [`graph`] record their own forward pass and implement
//! [`Differentiable`], which is what [`grad_check`] drives.

mod attention;
mod dense;
pub mod graph;
mod gradcheck;
mod matrix;
mod ops;

use alloc::{string::String, vec::Vec};

pub use attention::{check_heads, mhsa, AttentionParams};
pub(crate) use attention::{mhsa_backward, mhsa_forward, AttentionCache};
pub use dense::{Dense, Mlp};
pub(crate) use dense::MlpCache;
pub use gradcheck::{grad_check, relative_error, GradCheckReport, FD_STEP};
pub use graph::{Differentiable, LayerGrads};
pub use matrix::{dot, norm, Matrix};
pub use ops::{
    gelu, gelu_backward, l2_normalize, l2_normalize_backward, layer_norm, softmax_in_place,
    softmax_rows, softmax_rows_backward, LayerNormParams, LAYER_NORM_EPS, NORM_EPS,
};
pub(crate) use ops::{layer_norm_backward, layer_norm_forward, LayerNormCache};

/// A fixed, ordered collection of parameter tensors.
///
/// `named_tensors` and `tensors_mut` must enumerate the same tensors in the
/// same order; optimizers and checkpoints rely on it.
pub trait Parameters {
    fn named_tensors(&self) -> Vec<(String, &Matrix)>;

    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;

    fn tensors(&self) -> Vec<&Matrix> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    fn all_zero(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.as_slice().iter().all(|&v| v == 0.0))
    }
}

impl Parameters for LayerNormParams {
    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        alloc::vec![("gain".into(), &self.gain), ("bias".into(), &self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        alloc::vec![&mut self.gain, &mut self.bias]
    }
}

impl Parameters for AttentionParams {
    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        alloc::vec![
            ("wq".into(), &self.wq),
            ("wk".into(), &self.wk),
            ("wv".into(), &self.wv),
            ("wo".into(), &self.wo),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        alloc::vec![&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }
}
