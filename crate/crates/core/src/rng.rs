//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from a
//! `(seed, stream)` pair, so adding a consumer never perturbs the draws seen
//! by another one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::numerics::Matrix;

pub type Stream = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal(rng: &mut Stream) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vec(rng: &mut Stream, len: usize, std: f64) -> alloc::vec::Vec<f64> {
    (0..len).map(|_| std * normal(rng)).collect()
}

pub fn normal_matrix(rng: &mut Stream, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_vec(rows, cols, normal_vec(rng, rows * cols, std)).expect("sized by construction")
}
