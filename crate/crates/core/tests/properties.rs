use aff_core::fusion::{mixer_forward, project_and_stack, FamilySchema, FeatureBundle, MixerConfig, MixerParams};
use aff_core::numerics::{layer_norm, mhsa, norm, softmax_rows, AttentionParams};
use aff_core::retrieval::{average_precision, random_ranking_ap, RetrievalIndex};
use aff_core::rng;
use aff_core::train::{arcface_loss, momentum_update, ClassifierHead};
use aff_core::Matrix;
use proptest::prelude::*;

fn matrix(seed: u64, rows: usize, cols: usize) -> Matrix {
    rng::normal_matrix(&mut rng::stream(seed, 0), rows, cols, 1.0)
}

fn permutation(seed: u64, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng::stream(seed, 9));
    p
}

fn permute_rows(m: &Matrix, p: &[usize]) -> Matrix {
    let rows: Vec<&[f64]> = p.iter().map(|&i| m.row(i)).collect();
    Matrix::from_rows(&rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, shift in -50.0f64..50.0) {
        let x = matrix(seed, rows, cols);
        let y = softmax_rows(&x);
        for r in y.iter_rows() {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        let shifted = softmax_rows(&x.map(|v| v + shift));
        for (a, b) in y.as_slice().iter().zip(shifted.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn layer_norm_ignores_constant_offsets(seed in any::<u64>(), cols in 2usize..12, c in -20.0f64..20.0) {
        let x = matrix(seed, 3, cols);
        let gain = vec![1.0; cols];
        let bias = vec![0.0; cols];
        let a = layer_norm(&x, &gain, &bias).unwrap();
        let b = layer_norm(&x.map(|v| v + c), &gain, &bias).unwrap();
        for (p, q) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((p - q).abs() <= 1e-8);
        }
    }

    #[test]
    fn attention_is_row_permutation_equivariant(seed in any::<u64>(), n in 1usize..7) {
        let d = 8;
        let x = matrix(seed, n, d);
        let params = AttentionParams::init(d, &mut rng::stream(seed, 1));
        let p = permutation(seed, n);
        let lhs = mhsa(&permute_rows(&x, &p), &params, 2).unwrap();
        let rhs = permute_rows(&mhsa(&x, &params, 2).unwrap(), &p);
        for (a, b) in lhs.as_slice().iter().zip(rhs.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn mixer_ignores_gallery_token_order(seed in any::<u64>(), k in 1usize..5, locals in 0usize..4) {
        let schema: Vec<FamilySchema> = (0..k).map(|i| FamilySchema::global(3 + i)).chain(
            (locals > 0).then(|| FamilySchema::local(4, locals))).collect();
        let cfg = MixerConfig { dim: 8, hidden: 16, depth: 2, heads: 2, share_weights: true };
        let params = MixerParams::init(cfg, &schema, &mut rng::stream(seed, 1)).unwrap();
        let mut r = rng::stream(seed, 2);
        let globals = (0..k).map(|i| rng::normal_vec(&mut r, 3 + i, 1.0)).collect();
        let local_sets = if locals > 0 { vec![rng::normal_matrix(&mut r, locals, 4, 1.0)] } else { vec![] };
        let bundle = FeatureBundle::new(0, None, globals, local_sets).unwrap();
        let seq = project_and_stack(&bundle, &params.projections).unwrap();
        let out = mixer_forward(&seq, &params).unwrap();
        prop_assert!((norm(&out) - 1.0).abs() <= 1e-9);
        let p = permutation(seed, seq.len());
        let mut shuffled = seq.clone();
        shuffled.tokens = permute_rows(&seq.tokens, &p);
        shuffled.provenance = p.iter().map(|&i| seq.provenance[i]).collect();
        let again = mixer_forward(&shuffled, &params).unwrap();
        for (a, b) in out.iter().zip(&again) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn arcface_loss_is_scale_free_and_non_negative(seed in any::<u64>(), classes in 1usize..6, k in 0.01f64..100.0) {
        let head = ClassifierHead::new(matrix(seed, classes, 5), 32.0, 0.3).unwrap();
        let f = rng::normal_vec(&mut rng::stream(seed, 3), 5, 1.0);
        let label = (seed % classes as u64) as usize;
        let a = arcface_loss(&f, &head, label).unwrap();
        let scaled: Vec<f64> = f.iter().map(|v| v * k).collect();
        let b = arcface_loss(&scaled, &head, label).unwrap();
        prop_assert!(a.loss >= 0.0);
        prop_assert!((a.loss - b.loss).abs() <= 1e-9 * a.loss.max(1.0));
    }

    #[test]
    fn momentum_contracts_the_gap(seed in any::<u64>(), alpha in 0.0f64..0.999, steps in 1usize..20) {
        let target = ClassifierHead::new(matrix(seed, 4, 3), 32.0, 0.3).unwrap();
        let mut q = ClassifierHead::new(matrix(seed ^ 1, 4, 3), 32.0, 0.3).unwrap();
        let gap = |q: &ClassifierHead| {
            let mut d = q.prototypes.clone();
            d.scale(-1.0);
            d.add_assign(&target.prototypes);
            d.frobenius_norm()
        };
        let start = gap(&q);
        for _ in 0..steps {
            momentum_update(&mut q, &target, alpha).unwrap();
        }
        let expected = start * alpha.powi(steps as i32);
        prop_assert!((gap(&q) - expected).abs() <= 1e-12 * start.max(1.0));
    }

    #[test]
    fn average_precision_is_a_fraction(seed in any::<u64>(), n in 1usize..30, r in 1usize..30) {
        let r = r.min(n);
        let ranked: Vec<u64> = permutation(seed, n).into_iter().map(|i| i as u64).collect();
        let positives: Vec<u64> = (0..r as u64).collect();
        let ap = average_precision(&ranked, &positives, &[]).unwrap();
        prop_assert!(ap > 0.0 && ap <= 1.0);
        let chance = random_ranking_ap(n, r);
        prop_assert!(chance > 0.0 && chance <= 1.0);
        // Positives ranked first always reach 1.
        let mut best = positives.clone();
        best.extend(r as u64..n as u64);
        prop_assert_eq!(average_precision(&best, &positives, &[]), Some(1.0));
    }

    #[test]
    fn search_scores_are_sorted(seed in any::<u64>(), n in 1usize..40, k in 1usize..40) {
        let k = k.min(n);
        let m = matrix(seed, n, 6);
        let rows: Vec<Vec<f64>> = m.iter_rows().map(<[f64]>::to_vec).collect();
        let ids: Vec<u64> = (0..n as u64).rev().collect();
        let index = RetrievalIndex::build(&ids, &rows, "p").unwrap();
        let q = rng::normal_vec(&mut rng::stream(seed, 4), 6, 1.0);
        let hits = index.search(&q, k).unwrap();
        prop_assert_eq!(hits.len(), k);
        for w in hits.windows(2) {
            prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
        }
        for (_, s) in &hits {
            prop_assert!(s.abs() <= 1.0 + 1e-12);
        }
    }
}
