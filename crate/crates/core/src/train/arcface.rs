//! Additive angular margin (ArcFace) softmax loss.

use alloc::{format, vec, vec::Vec};

use crate::numerics::graph::{check_upstream, Differentiable, LayerGrads};
use crate::numerics::{dot, norm, Matrix, NORM_EPS};
use crate::{Error, Result};

/// Cosines are clamped to `[-1 + CLAMP, 1 - CLAMP]` before `acos`.
pub const COS_CLAMP: f64 = 1e-7;

/// Classifier prototypes with the ArcFace scale `s` and additive margin `m`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassifierHead {
    /// `classes × d`; rows are normalized only inside the loss.
    pub prototypes: Matrix,
    pub scale: f64,
    pub margin: f64,
}

impl ClassifierHead {
    pub fn new(prototypes: Matrix, scale: f64, margin: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Config(format!("ArcFace scale must be positive, got {scale}")));
        }
        if !(0.0..core::f64::consts::FRAC_PI_2).contains(&margin) {
            return Err(Error::Config(format!("ArcFace margin must lie in [0, π/2), got {margin}")));
        }
        if !prototypes.is_finite() || prototypes.rows() == 0 {
            return Err(Error::Config("prototypes must be finite and non-empty".into()));
        }
        Ok(ClassifierHead {
            prototypes,
            scale,
            margin,
        })
    }

    pub fn classes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArcFaceOutput {
    pub loss: f64,
    pub grad_feature: Vec<f64>,
    pub grad_prototypes: Matrix,
}

/// `-log softmax(s·[cos(θ_y + m), cos θ_j (j ≠ y)])_y` where `θ_j` is the
/// angle between the feature and the `j`-th prototype.
///
/// The feature and the prototypes are L2-normalized internally, so the loss
/// is invariant to their scale. When the target cosine falls outside the
/// clamp range its derivative is zero.
pub fn arcface_loss(feature: &[f64], head: &ClassifierHead, label: usize) -> Result<ArcFaceOutput> {
    let n = head.classes();
    let d = head.dim();
    if label >= n {
        return Err(Error::Schema(format!("label {label} for {n} classes")));
    }
    if feature.len() != d {
        return Err(Error::dim(
            "arcface_loss",
            format!("feature width {} for prototype width {d}", feature.len()),
        ));
    }
    let f_norm = norm(feature);
    if !(f_norm > NORM_EPS) {
        return Err(Error::Degenerate("arcface_loss"));
    }
    let fhat: Vec<f64> = feature.iter().map(|v| v / f_norm).collect();

    let mut w_norms = Vec::with_capacity(n);
    let mut cosines = Vec::with_capacity(n);
    for j in 0..n {
        let w = head.prototypes.row(j);
        let wn = norm(w);
        if !(wn > NORM_EPS) {
            return Err(Error::Degenerate("arcface_loss prototype"));
        }
        w_norms.push(wn);
        cosines.push(dot(w, &fhat) / wn);
    }

    let (s, m) = (head.scale, head.margin);
    let lo = -1.0 + COS_CLAMP;
    let hi = 1.0 - COS_CLAMP;
    let cy = cosines[label].clamp(lo, hi);
    let theta = libm::acos(cy);
    let mut logits: Vec<f64> = cosines.iter().map(|c| s * c).collect();
    logits[label] = s * libm::cos(theta + m);

    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| libm::exp(l - max)).sum();
    let lse = max + libm::log(sum);
    let loss = lse - logits[label];

    // d loss / d cos_j
    let mut dcos: Vec<f64> = logits.iter().map(|l| s * libm::exp(l - lse)).collect();
    let target_slope = if (lo..=hi).contains(&cosines[label]) {
        libm::cos(m) + libm::sin(m) * cy / libm::sqrt(1.0 - cy * cy)
    } else {
        0.0
    };
    dcos[label] = (dcos[label] - s) * target_slope;

    let mut dfhat = vec![0.0; d];
    let mut grad_prototypes = Matrix::zeros(n, d);
    for j in 0..n {
        let w = head.prototypes.row(j);
        let wn = w_norms[j];
        let g = dcos[j];
        if g == 0.0 {
            continue;
        }
        for (acc, wk) in dfhat.iter_mut().zip(w) {
            *acc += g * wk / wn;
        }
        // d cos_j / d w_j = (f̂ − ŵ_j cos_j) / ‖w_j‖
        let c = cosines[j];
        for (k, o) in grad_prototypes.row_mut(j).iter_mut().enumerate() {
            *o = g * (fhat[k] - w[k] / wn * c) / wn;
        }
    }
    let proj = dot(&fhat, &dfhat);
    let grad_feature = dfhat
        .iter()
        .zip(&fhat)
        .map(|(g, u)| (g - u * proj) / f_norm)
        .collect();

    Ok(ArcFaceOutput {
        loss,
        grad_feature,
        grad_prototypes,
    })
}

/// Differentiable view of the loss for a fixed label: input `1 × d` feature,
/// output the `1 × 1` loss, parameters the prototypes.
pub struct ArcFaceGraph {
    pub head: ClassifierHead,
    pub label: usize,
    last: Option<ArcFaceOutput>,
}

impl ArcFaceGraph {
    pub fn new(head: ClassifierHead, label: usize) -> Self {
        ArcFaceGraph {
            head,
            label,
            last: None,
        }
    }
}

impl Differentiable for ArcFaceGraph {
    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let out = arcface_loss(x.as_slice(), &self.head, self.label)?;
        let loss = out.loss;
        self.last = Some(out);
        Ok(Matrix::row_vector(&[loss]))
    }

    fn backward(&mut self, upstream: &Matrix) -> Result<LayerGrads> {
        let last = self.last.as_ref().ok_or(Error::State("ArcFaceGraph"))?;
        check_upstream("ArcFaceGraph::backward", (1, 1), upstream)?;
        let u = upstream.get(0, 0);
        let mut gp = last.grad_prototypes.clone();
        gp.scale(u);
        let gf: Vec<f64> = last.grad_feature.iter().map(|g| g * u).collect();
        Ok(LayerGrads {
            params: vec![("prototypes".into(), gp)],
            input: Matrix::row_vector(&gf),
        })
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.head.prototypes]
    }
}
