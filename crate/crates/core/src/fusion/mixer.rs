//! Transformer mixer.
//!
//! A learnable fusion token is placed on top of the projected feature
//! sequence and the stack is passed `depth` times through one post-norm
//! transformer layer:
//!
//! ```text
//! Z̄ = LN(Z + MHSA(Z))
//! Z' = LN(Z̄ + GeLU(Z̄·W1)·W2)
//! ```
//!
//! The fusion token's final state is the aggregated gallery embedding. No
//! positional information is added, so the result does not depend on the
//! order of the gallery tokens.

use alloc::{format, string::String, vec::Vec};

use super::bundle::{project_and_stack, FamilySchema, FeatureBundle, FeatureSequence, ProjectionSet};
use crate::numerics::{
    check_heads, gelu, gelu_backward, l2_normalize, layer_norm_backward, layer_norm_forward,
    mhsa_backward, mhsa_forward, AttentionCache, AttentionParams, LayerNormCache,
    LayerNormParams, Matrix, Parameters,
};
use crate::rng::{self, Stream};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct MixerConfig {
    /// Token width `d`.
    pub dim: usize,
    /// Inner width `d_e` of the layer's perceptron.
    pub hidden: usize,
    /// Number of passes `C` through the layer.
    pub depth: usize,
    pub heads: usize,
    /// One set of layer weights reused on every pass (`true`), or separate
    /// weights per pass.
    pub share_weights: bool,
}

impl Default for MixerConfig {
    fn default() -> Self {
        MixerConfig {
            dim: 32,
            hidden: 64,
            depth: 4,
            heads: 4,
            share_weights: true,
        }
    }
}

impl MixerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 {
            return Err(Error::Config("mixer widths must be positive".into()));
        }
        if self.depth == 0 {
            return Err(Error::Config("mixer depth must be at least 1".into()));
        }
        check_heads(self.dim, self.heads)
    }

    fn layer_count(&self) -> usize {
        if self.share_weights {
            1
        } else {
            self.depth
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TransformerLayer {
    pub attn: AttentionParams,
    pub ln1: LayerNormParams,
    pub w1: Matrix,
    pub w2: Matrix,
    pub ln2: LayerNormParams,
}

impl TransformerLayer {
    pub fn init(dim: usize, hidden: usize, rng: &mut Stream) -> Self {
        TransformerLayer {
            attn: AttentionParams::init(dim, rng),
            ln1: LayerNormParams::new(dim),
            w1: rng::normal_matrix(rng, dim, hidden, 1.0 / libm::sqrt(dim as f64)),
            w2: rng::normal_matrix(rng, hidden, dim, 1.0 / libm::sqrt(hidden as f64)),
            ln2: LayerNormParams::new(dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        TransformerLayer {
            attn: AttentionParams::zeros(self.attn.dim()),
            ln1: self.ln1.zeros_like(),
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
            ln2: self.ln2.zeros_like(),
        }
    }

    fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        for (n, t) in self.attn.named_tensors() {
            out.push((format!("{prefix}.attn.{n}"), t));
        }
        out.push((format!("{prefix}.ln1.gain"), &self.ln1.gain));
        out.push((format!("{prefix}.ln1.bias"), &self.ln1.bias));
        out.push((format!("{prefix}.w1"), &self.w1));
        out.push((format!("{prefix}.w2"), &self.w2));
        out.push((format!("{prefix}.ln2.gain"), &self.ln2.gain));
        out.push((format!("{prefix}.ln2.bias"), &self.ln2.bias));
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.attn.tensors_mut();
        out.extend([
            &mut self.ln1.gain,
            &mut self.ln1.bias,
            &mut self.w1,
            &mut self.w2,
            &mut self.ln2.gain,
            &mut self.ln2.bias,
        ]);
        out
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerCache {
    attn: AttentionCache,
    ln1: LayerNormCache,
    mid: Matrix,
    pre_gelu: Matrix,
    act: Matrix,
    ln2: LayerNormCache,
}

pub(crate) fn layer_forward(z: &Matrix, layer: &TransformerLayer, heads: usize) -> Result<(Matrix, LayerCache)> {
    let (att, attn) = mhsa_forward(z, &layer.attn, heads)?;
    let mut s1 = z.clone();
    s1.add_assign(&att);
    let (mid, ln1) = layer_norm_forward(&s1, layer.ln1.gain.as_slice(), layer.ln1.bias.as_slice());
    let pre_gelu = mid.mm(&layer.w1);
    let act = gelu(&pre_gelu);
    let mut s2 = act.mm(&layer.w2);
    s2.add_assign(&mid);
    let (out, ln2) = layer_norm_forward(&s2, layer.ln2.gain.as_slice(), layer.ln2.bias.as_slice());
    Ok((
        out,
        LayerCache {
            attn,
            ln1,
            mid,
            pre_gelu,
            act,
            ln2,
        },
    ))
}

pub(crate) fn layer_backward(
    layer: &TransformerLayer,
    cache: &LayerCache,
    upstream: &Matrix,
    grad: &mut TransformerLayer,
) -> Matrix {
    let ds2 = layer_norm_backward(&cache.ln2, layer.ln2.gain.as_slice(), upstream, &mut grad.ln2);
    grad.w2.add_assign(&cache.act.mm_tn(&ds2));
    let dact = ds2.mm_nt(&layer.w2);
    let dpre = gelu_backward(&cache.pre_gelu, &dact);
    grad.w1.add_assign(&cache.mid.mm_tn(&dpre));
    let mut dmid = dpre.mm_nt(&layer.w1);
    dmid.add_assign(&ds2);
    let ds1 = layer_norm_backward(&cache.ln1, layer.ln1.gain.as_slice(), &dmid, &mut grad.ln1);
    let mut dz = mhsa_backward(&layer.attn, &cache.attn, &ds1, &mut grad.attn);
    dz.add_assign(&ds1);
    dz
}

/// Fusion token, transformer layer weights and the per-family projections.
/// Standard deviation of the fusion token at initialization. Kept small so
/// that the token starts out carrying no item-independent direction.
pub const FUSION_TOKEN_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MixerParams {
    pub config: MixerConfig,
    pub fusion_token: Matrix,
    pub layers: Vec<TransformerLayer>,
    pub projections: ProjectionSet,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct MixerTrace {
    globals: Vec<Vec<f64>>,
    locals: Vec<Matrix>,
    caches: Vec<LayerCache>,
    tokens: usize,
}

impl MixerParams {
    pub fn init(config: MixerConfig, schema: &[FamilySchema], rng: &mut Stream) -> Result<Self> {
        config.validate()?;
        if schema.is_empty() {
            return Err(Error::Schema("mixer needs at least one feature family".into()));
        }
        let projections = ProjectionSet::init(schema, config.dim, rng);
        let fusion_token = rng::normal_matrix(rng, 1, config.dim, FUSION_TOKEN_INIT_STD);
        let layers = (0..config.layer_count())
            .map(|_| TransformerLayer::init(config.dim, config.hidden, rng))
            .collect();
        Ok(MixerParams {
            config,
            fusion_token,
            layers,
            projections,
        })
    }

    pub fn zeros_like(&self) -> Self {
        MixerParams {
            config: self.config,
            fusion_token: Matrix::zeros(1, self.config.dim),
            layers: self.layers.iter().map(TransformerLayer::zeros_like).collect(),
            projections: self.projections.zeros_like(),
        }
    }

    fn layer_for_pass(&self, pass: usize) -> usize {
        if self.config.share_weights {
            0
        } else {
            pass
        }
    }

    /// Runs the layer stack over `[f_fusion; F]` and returns the final state
    /// of every token.
    pub fn encode(&self, seq: &FeatureSequence) -> Result<Matrix> {
        Ok(self.encode_cached(seq)?.0)
    }

    fn encode_cached(&self, seq: &FeatureSequence) -> Result<(Matrix, Vec<LayerCache>)> {
        if seq.is_empty() {
            return Err(Error::Schema("empty feature sequence".into()));
        }
        if seq.tokens.cols() != self.config.dim {
            return Err(Error::dim(
                "mixer_forward",
                format!("token width {} for mixer width {}", seq.tokens.cols(), self.config.dim),
            ));
        }
        let mut z = seq.tokens.prepend_row(self.fusion_token.as_slice());
        let mut caches = Vec::with_capacity(self.config.depth);
        for pass in 0..self.config.depth {
            let (next, cache) = layer_forward(&z, &self.layers[self.layer_for_pass(pass)], self.config.heads)?;
            caches.push(cache);
            z = next;
        }
        Ok((z, caches))
    }

    /// Unnormalized fusion-token output for a bundle, with the trace needed by
    /// [`backward`](Self::backward).
    pub fn forward_traced(&self, bundle: &FeatureBundle) -> Result<(Vec<f64>, MixerTrace)> {
        let seq = project_and_stack(bundle, &self.projections)?;
        let (z, caches) = self.encode_cached(&seq)?;
        Ok((
            z.row(0).to_vec(),
            MixerTrace {
                globals: bundle.globals.clone(),
                locals: bundle.locals.clone(),
                caches,
                tokens: seq.len(),
            },
        ))
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the raw features, flattened in stacking order.
    pub fn backward(&self, trace: &MixerTrace, upstream: &[f64], grad: &mut MixerParams) -> Vec<f64> {
        let d = self.config.dim;
        let mut dz = Matrix::zeros(trace.tokens + 1, d);
        dz.row_mut(0).copy_from_slice(upstream);
        for pass in (0..self.config.depth).rev() {
            let li = self.layer_for_pass(pass);
            dz = layer_backward(&self.layers[li], &trace.caches[pass], &dz, &mut grad.layers[li]);
        }
        for (g, v) in grad.fusion_token.as_mut_slice().iter_mut().zip(dz.row(0)) {
            *g += v;
        }

        let mut draw = Vec::new();
        let mut row = 1;
        for (i, g) in trace.globals.iter().enumerate() {
            let dt = dz.row(row);
            let gw = &mut grad.projections.global[i];
            for (k, &gk) in g.iter().enumerate() {
                for (o, &t) in gw.row_mut(k).iter_mut().zip(dt) {
                    *o += gk * t;
                }
            }
            draw.extend_from_slice(Matrix::row_vector(dt).mm_nt(&self.projections.global[i]).as_slice());
            row += 1;
        }
        for (j, l) in trace.locals.iter().enumerate() {
            let mut dt = Matrix::zeros(l.rows(), d);
            for r in 0..l.rows() {
                dt.row_mut(r).copy_from_slice(dz.row(row));
                row += 1;
            }
            grad.projections.local[j].add_assign(&l.mm_tn(&dt));
            draw.extend_from_slice(dt.mm_nt(&self.projections.local[j]).as_slice());
        }
        draw
    }

    /// L2-normalized gallery embedding.
    pub fn embed(&self, bundle: &FeatureBundle) -> Result<Vec<f64>> {
        l2_normalize(&self.forward_traced(bundle)?.0)
    }
}

impl Parameters for MixerParams {
    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = alloc::vec![(String::from("fusion_token"), &self.fusion_token)];
        for (i, l) in self.layers.iter().enumerate() {
            l.push_tensors(&format!("layers.{i}"), &mut out);
        }
        for (n, t) in self.projections.named_tensors() {
            out.push((format!("projections.{n}"), t));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = alloc::vec![&mut self.fusion_token];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.extend(self.projections.tensors_mut());
        out
    }
}

/// Aggregates a projected sequence into the L2-normalized fusion embedding.
pub fn mixer_forward(seq: &FeatureSequence, params: &MixerParams) -> Result<Vec<f64>> {
    let z = params.encode(seq)?;
    l2_normalize(z.row(0))
}
