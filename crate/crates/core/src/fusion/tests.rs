use alloc::{vec, vec::Vec};

use super::*;
use crate::numerics::{gelu, grad_check, layer_norm, mhsa, norm, Dense, Mlp};
use crate::rng::{self, Stream};

fn schema() -> Vec<FamilySchema> {
    vec![
        FamilySchema::global(6),
        FamilySchema::global(5),
        FamilySchema::local(4, 3),
    ]
}

fn small_config(depth: usize) -> MixerConfig {
    MixerConfig {
        dim: 8,
        hidden: 16,
        depth,
        heads: 2,
        share_weights: true,
    }
}

fn random_bundle(r: &mut Stream, s: &[FamilySchema]) -> FeatureBundle {
    let flat = rng::normal_vec(r, flat_width(s), 1.0);
    let raw = FeatureBundle::from_flat(s, &flat, 9, Some(1)).unwrap();
    FeatureBundle::new(raw.id, raw.label, raw.globals, raw.locals).unwrap()
}

/// Randomizes LN affine parameters so the checks do not sit at gain=1, bias=0.
fn perturb_norms(p: &mut MixerParams, r: &mut Stream) {
    for l in &mut p.layers {
        for ln in [&mut l.ln1, &mut l.ln2] {
            for v in ln.gain.as_mut_slice() {
                *v = 1.0 + 0.3 * rng::normal(r);
            }
            for v in ln.bias.as_mut_slice() {
                *v = 0.3 * rng::normal(r);
            }
        }
    }
}

/// One post-norm transformer layer written out with the public primitives.
fn reference_layer(z: &Matrix, l: &TransformerLayer, heads: usize) -> Matrix {
    let mut s1 = z.clone();
    s1.add_assign(&mhsa(z, &l.attn, heads).unwrap());
    let mid = layer_norm(&s1, l.ln1.gain.as_slice(), l.ln1.bias.as_slice()).unwrap();
    let mut s2 = gelu(&mid.matmul(&l.w1).unwrap()).matmul(&l.w2).unwrap();
    s2.add_assign(&mid);
    layer_norm(&s2, l.ln2.gain.as_slice(), l.ln2.bias.as_slice()).unwrap()
}

#[test]
fn zero_attention_isolates_the_fusion_token() {
    let mut r = rng::stream(40, 0);
    let s = schema();
    let mut p = MixerParams::init(small_config(1), &s, &mut r).unwrap();
    p.layers[0].attn = crate::numerics::AttentionParams::zeros(8);
    let a = p.embed(&random_bundle(&mut r, &s)).unwrap();
    let b = p.embed(&random_bundle(&mut r, &s)).unwrap();
    assert_eq!(a, b);

    // Closed form: LN(LN(f) + MLP(LN(f))) on the fusion token alone.
    let f = p.fusion_token.clone();
    let l = &p.layers[0];
    let mid = layer_norm(&f, l.ln1.gain.as_slice(), l.ln1.bias.as_slice()).unwrap();
    let mut s2 = gelu(&mid.matmul(&l.w1).unwrap()).matmul(&l.w2).unwrap();
    s2.add_assign(&mid);
    let out = layer_norm(&s2, l.ln2.gain.as_slice(), l.ln2.bias.as_slice()).unwrap();
    let expect = crate::numerics::l2_normalize(out.as_slice()).unwrap();
    for (x, y) in a.iter().zip(&expect) {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn gallery_token_permutation_invariance() {
    let mut r = rng::stream(41, 0);
    let s = schema();
    let p = MixerParams::init(small_config(3), &s, &mut r).unwrap();
    for _ in 0..5 {
        let seq = project_and_stack(&random_bundle(&mut r, &s), &p.projections).unwrap();
        let base = mixer_forward(&seq, &p).unwrap();
        let n = seq.len();
        let perm: Vec<usize> = (0..n).rev().collect();
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| seq.tokens.row(i).to_vec()).collect();
        let permuted = FeatureSequence {
            tokens: Matrix::from_rows(&rows).unwrap(),
            provenance: perm.iter().map(|&i| seq.provenance[i]).collect(),
        };
        let other = mixer_forward(&permuted, &p).unwrap();
        for (a, b) in base.iter().zip(&other) {
            assert!((a - b).abs() <= 1e-9);
        }
    }
}

#[test]
fn matches_layer_by_layer_composition() {
    let mut r = rng::stream(42, 0);
    let s = vec![FamilySchema::global(4), FamilySchema::global(3), FamilySchema::global(5)];
    for depth in [1, 2, 4] {
        let mut p = MixerParams::init(small_config(depth), &s, &mut r).unwrap();
        perturb_norms(&mut p, &mut r);
        let seq = project_and_stack(&random_bundle(&mut r, &s), &p.projections).unwrap();
        assert_eq!(seq.len(), 3);
        let mut z = seq.tokens.prepend_row(p.fusion_token.as_slice());
        for _ in 0..depth {
            z = reference_layer(&z, &p.layers[0], 2);
        }
        let expect = crate::numerics::l2_normalize(z.row(0)).unwrap();
        let got = mixer_forward(&seq, &p).unwrap();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-10);
        }
    }
}

#[test]
fn embedding_is_unit_norm_and_deterministic() {
    let mut r = rng::stream(43, 0);
    let s = schema();
    let p = MixerParams::init(MixerConfig::default(), &s, &mut r).unwrap();
    let b = random_bundle(&mut r, &s);
    let e = p.embed(&b).unwrap();
    assert!((norm(&e) - 1.0).abs() <= 1e-9);
    assert_eq!(e, p.embed(&b).unwrap());
}

#[test]
fn config_validation() {
    let s = schema();
    let mut r = rng::stream(44, 0);
    let mut c = small_config(0);
    assert!(matches!(MixerParams::init(c, &s, &mut r), Err(Error::Config(_))));
    c.depth = 2;
    c.heads = 3;
    assert!(matches!(MixerParams::init(c, &s, &mut r), Err(Error::Config(_))));
}

#[test]
fn mixer_gradients_match_finite_differences() {
    let s = schema();
    for seed in 0..3 {
        let mut r = rng::stream(45, seed);
        let mut p = MixerParams::init(small_config(2), &s, &mut r).unwrap();
        perturb_norms(&mut p, &mut r);
        let mut graph = GalleryGraph::new(GalleryModel::Transformer(p), &s);
        let rep = grad_check(&mut graph, (1, flat_width(&s)), 2, seed).unwrap();
        assert!(rep.max_relative_error <= 1e-5, "{rep:?}");
    }
}

#[test]
fn unshared_mixer_gradients_match_finite_differences() {
    let s = schema();
    let mut r = rng::stream(46, 0);
    let mut cfg = small_config(2);
    cfg.share_weights = false;
    let p = MixerParams::init(cfg, &s, &mut r).unwrap();
    assert_eq!(p.layers.len(), 2);
    let mut graph = GalleryGraph::new(GalleryModel::Transformer(p), &s);
    let rep = grad_check(&mut graph, (1, flat_width(&s)), 2, 7).unwrap();
    assert!(rep.max_relative_error <= 1e-5, "{rep:?}");
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let s = schema();
    let mut r = rng::stream(47, 0);
    let p = MixerParams::init(small_config(2), &s, &mut r).unwrap();
    let (_, trace) = p.forward_traced(&random_bundle(&mut r, &s)).unwrap();
    let mut g = p.zeros_like();
    let dx = p.backward(&trace, &[0.0; 8], &mut g);
    assert!(g.all_zero());
    assert!(dx.iter().all(|&v| v == 0.0));
}

/// With shared weights the gradient of each layer tensor is the sum of the
/// contributions of every pass; an unshared copy with identical weights
/// exposes those contributions separately.
#[test]
fn shared_gradient_is_sum_over_unrolled_passes() {
    let s = schema();
    let mut r = rng::stream(48, 0);
    let shared = MixerParams::init(small_config(2), &s, &mut r).unwrap();
    let mut unrolled = shared.clone();
    unrolled.config.share_weights = false;
    unrolled.layers = vec![shared.layers[0].clone(), shared.layers[0].clone()];

    let b = random_bundle(&mut r, &s);
    let up = rng::normal_vec(&mut r, 8, 1.0);
    let (y1, t1) = shared.forward_traced(&b).unwrap();
    let (y2, t2) = unrolled.forward_traced(&b).unwrap();
    assert_eq!(y1, y2);
    let mut g1 = shared.zeros_like();
    let mut g2 = unrolled.zeros_like();
    shared.backward(&t1, &up, &mut g1);
    unrolled.backward(&t2, &up, &mut g2);

    let layer_sum: Vec<f64> = g2.layers[0]
        .tensors_flat()
        .iter()
        .zip(g2.layers[1].tensors_flat())
        .map(|(a, b)| a + b)
        .collect();
    for (a, b) in g1.layers[0].tensors_flat().iter().zip(&layer_sum) {
        assert!((a - b).abs() <= 1e-12);
    }
    assert_eq!(g1.fusion_token, g2.fusion_token);
    assert_eq!(g1.projections, g2.projections);
}

impl TransformerLayer {
    fn tensors_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for t in [&self.attn.wq, &self.attn.wk, &self.attn.wv, &self.attn.wo, &self.ln1.gain, &self.ln1.bias, &self.w1, &self.w2, &self.ln2.gain, &self.ln2.bias] {
            v.extend_from_slice(t.as_slice());
        }
        v
    }
}

#[test]
fn baseline_identity_is_normalized_input() {
    let s = vec![FamilySchema::global(3)];
    let mlp = Mlp {
        layers: vec![Dense {
            weight: Matrix::identity(3),
            bias: Matrix::zeros(1, 3),
        }],
    };
    let p = BaselineMixerParams::from_mlp(&s, mlp).unwrap();
    let b = FeatureBundle::new_raw(0, None, vec![vec![1.0, 2.0, 2.0]], Vec::new()).unwrap();
    let e = baseline_forward(&b, &p).unwrap();
    assert_eq!(e, vec![1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]);
}

#[test]
fn baseline_widths() {
    let s = vec![FamilySchema::global(3), FamilySchema::global(5), FamilySchema::local(2, 4)];
    let mut r = rng::stream(49, 0);
    let p = BaselineMixerParams::init(&s, &[16], 8, &mut r).unwrap();
    assert_eq!(p.mlp.layers[0].weight.shape(), (16, 16));
    assert_eq!(p.mlp.layers[1].weight.shape(), (16, 8));
    let wrong = vec![FamilySchema::global(3)];
    let b = random_bundle(&mut r, &wrong);
    assert!(matches!(baseline_forward(&b, &p), Err(Error::Schema(_))));
}

#[test]
fn baseline_matches_composition_oracle() {
    let s = vec![FamilySchema::global(3), FamilySchema::local(2, 2)];
    let mut r = rng::stream(50, 0);
    let p = BaselineMixerParams::init(&s, &[6], 4, &mut r).unwrap();
    let b = random_bundle(&mut r, &s);
    let x = b.flatten();
    let l0 = &p.mlp.layers[0];
    let l1 = &p.mlp.layers[1];
    let h: Vec<f64> = (0..6)
        .map(|j| {
            let z: f64 = (0..x.len()).map(|k| x[k] * l0.weight.get(k, j)).sum::<f64>() + l0.bias.get(0, j);
            0.5 * z * (1.0 + libm::erf(z / core::f64::consts::SQRT_2))
        })
        .collect();
    let y: Vec<f64> = (0..4)
        .map(|j| (0..6).map(|k| h[k] * l1.weight.get(k, j)).sum::<f64>() + l1.bias.get(0, j))
        .collect();
    let n = norm(&y);
    for (a, b) in baseline_forward(&b, &p).unwrap().iter().zip(&y) {
        assert!((a - b / n).abs() <= 1e-10);
    }
}

#[test]
fn baseline_gradients_match_finite_differences() {
    let s = vec![FamilySchema::global(3), FamilySchema::local(2, 2)];
    let mut r = rng::stream(51, 0);
    let p = BaselineMixerParams::init(&s, &[6], 4, &mut r).unwrap();
    let mut graph = GalleryGraph::new(GalleryModel::Mlp(p), &s);
    let rep = grad_check(&mut graph, (1, flat_width(&s)), 5, 3).unwrap();
    assert!(rep.max_relative_error <= 1e-5, "{rep:?}");
}
