//! Central finite-difference verification of analytic gradients.

use super::graph::Differentiable;
use super::matrix::{dot, Matrix};
use crate::rng;
use crate::Result;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub trials: usize,
    /// Number of scalar partial derivatives compared.
    pub checked: usize,
    pub max_relative_error: f64,
}

fn probe<L: Differentiable + ?Sized>(layer: &mut L, x: &Matrix, upstream: &Matrix) -> Result<f64> {
    let y = layer.forward(x)?;
    Ok(dot(y.as_slice(), upstream.as_slice()))
}

/// Compares analytic and central-difference gradients of the scalar
/// `Σ R ⊙ layer(x)` for `trials` random inputs `x ~ N(0, 1)` of shape `input`
/// and random projections `R`, over every parameter entry and every input
/// entry.
pub fn grad_check<L: Differentiable + ?Sized>(
    layer: &mut L,
    input: (usize, usize),
    trials: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for trial in 0..trials {
        let mut r = rng::stream(seed, 1000 + trial as u64);
        let mut x = rng::normal_matrix(&mut r, input.0, input.1, 1.0);
        let y = layer.forward(&x)?;
        let upstream = rng::normal_matrix(&mut r, y.rows(), y.cols(), 1.0);
        let grads = layer.backward(&upstream)?;

        let n_params = layer.params_mut().len();
        for p in 0..n_params {
            let len = layer.params_mut()[p].len();
            for i in 0..len {
                let orig = layer.params_mut()[p].as_slice()[i];
                layer.params_mut()[p].as_mut_slice()[i] = orig + FD_STEP;
                let plus = probe(layer, &x, &upstream)?;
                layer.params_mut()[p].as_mut_slice()[i] = orig - FD_STEP;
                let minus = probe(layer, &x, &upstream)?;
                layer.params_mut()[p].as_mut_slice()[i] = orig;
                let numeric = (plus - minus) / (2.0 * FD_STEP);
                worst = worst.max(relative_error(grads.params[p].1.as_slice()[i], numeric));
                checked += 1;
            }
        }
        for i in 0..x.len() {
            let orig = x.as_slice()[i];
            x.as_mut_slice()[i] = orig + FD_STEP;
            let plus = probe(layer, &x, &upstream)?;
            x.as_mut_slice()[i] = orig - FD_STEP;
            let minus = probe(layer, &x, &upstream)?;
            x.as_mut_slice()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grads.input.as_slice()[i], numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        trials,
        checked,
        max_relative_error: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::{Gelu, LayerNorm, Linear, SelfAttention, Softmax};
    use crate::numerics::{AttentionParams, Dense, LayerNormParams};

    const TOL: f64 = 1e-5;

    #[test]
    fn relative_error_floor_is_one() {
        assert_eq!(relative_error(1e-8, 0.0), 1e-8);
        assert_eq!(relative_error(200.0, 100.0), 0.5);
    }

    #[test]
    fn linear_layer() {
        let mut r = rng::stream(20, 0);
        let mut lin = Linear::new(Dense::init(5, 3, &mut r));
        let rep = grad_check(&mut lin, (4, 5), 10, 1).unwrap();
        assert!(rep.max_relative_error <= TOL, "{rep:?}");
    }

    #[test]
    fn layer_norm_with_random_affine() {
        let mut r = rng::stream(21, 0);
        let mut p = LayerNormParams::new(6);
        p.gain = rng::normal_matrix(&mut r, 1, 6, 1.0);
        p.bias = rng::normal_matrix(&mut r, 1, 6, 1.0);
        let rep = grad_check(&mut LayerNorm::new(p), (3, 6), 10, 2).unwrap();
        assert!(rep.max_relative_error <= TOL, "{rep:?}");
    }

    #[test]
    fn gelu_and_softmax() {
        let rep = grad_check(&mut Gelu::default(), (3, 5), 10, 3).unwrap();
        assert!(rep.max_relative_error <= TOL, "{rep:?}");
        let rep = grad_check(&mut Softmax::default(), (3, 5), 10, 4).unwrap();
        assert!(rep.max_relative_error <= TOL, "{rep:?}");
    }

    #[test]
    fn multi_head_attention() {
        let mut r = rng::stream(22, 0);
        let mut att = SelfAttention::new(AttentionParams::init(8, &mut r), 4);
        let rep = grad_check(&mut att, (5, 8), 10, 5).unwrap();
        assert!(rep.max_relative_error <= TOL, "{rep:?}");
    }
}
