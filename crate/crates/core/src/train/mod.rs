//! Joint training of the gallery mixer and the lightweight query encoder.
//!
//! The mixer is trained with an ArcFace loss against its own classifier
//! `ω^mix`. The query encoder is trained with an ArcFace loss against a second
//! classifier `ω^q` that never receives gradients: after every optimizer step
//! it is moved towards the mixer's classifier,
//!
//! ```text
//! ω^q ← α·ω^q + (1 − α)·ω^mix
//! ```
//!
//! which keeps the two embedding spaces compatible while decoupling the two
//! networks' training.

mod arcface;
mod encoder;
mod optim;
mod trainer;

pub use arcface::{arcface_loss, ArcFaceGraph, ArcFaceOutput, ClassifierHead, COS_CLAMP};
pub use encoder::{EncoderGraph, QueryEncoder};
pub use optim::{linear_decay, warmup_linear_decay, Sgd};
pub use trainer::{
    joint_step, loss_gradients, train, train_encoder, train_mixer, Aggregator, EpochLosses, Example, LossTerms,
    MixerRun, ModelConfig, ModelGrads, Models, Phase, StepLosses, TrainConfig, TrainMode, TrainReport,
};

use alloc::format;

use crate::numerics::Matrix;
use crate::{Error, Result};

/// `query ← α·query + (1 − α)·mixer`, elementwise over the prototypes.
pub fn momentum_update(query: &mut ClassifierHead, mixer: &ClassifierHead, alpha: f64) -> Result<()> {
    momentum_toward(query, &mixer.prototypes, alpha)
}

pub(crate) fn momentum_toward(query: &mut ClassifierHead, target: &Matrix, alpha: f64) -> Result<()> {
    if query.prototypes.shape() != target.shape() {
        return Err(Error::Schema(format!(
            "query head {:?} vs mixer head {:?}",
            query.prototypes.shape(),
            target.shape()
        )));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(format!("momentum must lie in [0, 1), got {alpha}")));
    }
    let keep = 1.0 - alpha;
    for (q, w) in query
        .prototypes
        .as_mut_slice()
        .iter_mut()
        .zip(target.as_slice())
    {
        *q = alpha * *q + keep * w;
    }
    Ok(())
}
