//! Storage formats, configuration, the run pipeline and the ablation
//! studies around `aff-core`, plus the `aff` command line.
//!
//! * [`feature_io`] the `AFF1` feature file.
//! * [`checkpoint`] the `AFFC` model checkpoint.
//! * [`dataset`] a generated dataset as a directory of feature files.
//! * [`config`] the TOML run configuration.
//! * [`manifest`] provenance records written next to every output.
//! * [`pipeline`] `gen-data`, `train`, `embed` and `eval`.
//! * [`ablate`] multi-seed studies reported as CSV tables.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod dataset;
mod error;
pub mod feature_io;
pub mod manifest;
pub mod pipeline;

pub use error::{Error, Result};
