//! Asymmetric feature fusion.
//!
//! Heterogeneous per-image gallery features (several global descriptors and
//! sets of local descriptors) are projected to a common width, stacked into a
//! token sequence and aggregated by a transformer mixer into one compact
//! gallery embedding. A lightweight query encoder is trained jointly so that
//! its embeddings are directly comparable with the mixer's, using an ArcFace
//! objective whose query-side classifier is a moving average of the mixer's.
//!
//! The crate is `no_std` (with `alloc`): every module here is pure
//! computation. File formats, configuration and the command line live in the
//! companion `aff` crate.
//!
//! Module map:
//!
//! * [`numerics`] dense matrices and differentiable layers with hand-written
//!   gradients, plus a finite-difference checker.
//! * [`fusion`] feature bundles, projection and stacking, the transformer
//!   mixer and the concatenation MLP baseline.
//! * [`train`] ArcFace heads, the momentum-updated query classifier, the query
//!   encoder and the joint training loop.
//! * [`synth`] reproducible synthetic multi-family feature datasets.
//! * [`retrieval`] exact cosine search, average precision and the
//!   symmetric / asymmetric / ensemble evaluation protocols.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

mod error;
pub mod fusion;
pub mod numerics;
pub mod retrieval;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use numerics::Matrix;
