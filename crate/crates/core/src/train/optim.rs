use crate::numerics::Matrix;

/// Plain SGD with decoupled weight decay:
/// `p ← p·(1 − lr·decay) − lr·g`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub weight_decay: f64,
}

impl Sgd {
    pub fn step<'a>(
        &self,
        lr: f64,
        params: impl IntoIterator<Item = &'a mut Matrix>,
        grads: impl IntoIterator<Item = &'a Matrix>,
    ) {
        let shrink = 1.0 - lr * self.weight_decay;
        for (p, g) in params.into_iter().zip(grads) {
            debug_assert_eq!(p.shape(), g.shape());
            for (pv, gv) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *pv = *pv * shrink - lr * gv;
            }
        }
    }
}

/// Learning rate for step `step` of `total`, decaying linearly from `base`
/// to zero.
pub fn linear_decay(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - step as f64 / total as f64)
}

/// [`linear_decay`] scaled by a linear ramp over the first `warmup` steps.
pub fn warmup_linear_decay(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    let ramp = if step < warmup {
        (step + 1) as f64 / warmup as f64
    } else {
        1.0
    };
    linear_decay(base, step, total) * ramp
}
