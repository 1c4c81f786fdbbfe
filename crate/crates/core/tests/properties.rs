//! Randomized invariants over the autodiff core, the attention blocks, fusion and the decoders.

use mhn::decoders::{count_predict, hinge_loss, AnswerSpace, OpenEndedHead};
use mhn::model::{Mhn, ModelConfig, ModelSpec};
use mhn::pvr::fuse_levels;
use mhn::sampling::{sample_clip_indices, FeatureRecord};
use mhn::tensor::check::{numeric_grad, rel_error};
use mhn::tensor::{Graph, ParamStore, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Max relative error of `sum(op(x) * w)` over every input.
fn op_error(inputs: &[Tensor], seed: u64, op: &dyn Fn(&mut Graph<'_>, &[Var]) -> Var) -> f64 {
    let store = ParamStore::new();
    let w = {
        let mut g = Graph::new(&store);
        let v: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = op(&mut g, &v);
        randn(g.shape(out), seed ^ 0x77)
    };
    let loss = |g: &mut Graph<'_>, v: &[Var]| {
        let out = op(g, v);
        let wv = g.constant(w.clone());
        let wv = g.reshape(wv, &g.shape(out).to_vec()).unwrap();
        let p = g.mul(out, wv).unwrap();
        g.sum_all(p)
    };
    let mut g = Graph::new(&store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let l = loss(&mut g, &vars);
    let grads = g.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let numeric = numeric_grad(x, 1e-5, |probe| {
            let mut g = Graph::new(&store);
            let v: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| g.constant(if j == k { probe.clone() } else { t.clone() }))
                .collect();
            let l = loss(&mut g, &v);
            g.scalar(l)
        });
        worst = worst.max(rel_error(grads.wrt(vars[k]).unwrap(), &numeric));
    }
    worst
}

fn tiny_model(
    scales: usize,
    recurrence: bool,
    answer: AnswerSpace,
    seed: u64,
) -> (Mhn, ParamStore) {
    let spec = ModelSpec {
        model: ModelConfig {
            d: 8,
            heads: 2,
            scales,
            window: 2,
            max_window: 4,
            word_dim: 6,
            recurrence,
            ..ModelConfig::default()
        },
        app_dim: 5,
        mot_dim: 3,
        vocab_size: 12,
        answer,
    };
    Mhn::new(spec, seed).unwrap()
}

fn row_sums(g: &Graph<'_>, v: Var) -> Vec<f64> {
    let cols = *g.shape(v).last().unwrap();
    g.value(v).chunks(cols).map(|r| r.iter().sum()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn matmul_and_elementwise_gradients(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1 << 40) {
        let (a, b) = (randn(&[m, k], seed), randn(&[k, n], seed + 1));
        prop_assert!(op_error(&[a.clone(), b], seed, &|g, v| g.matmul(v[0], v[1]).unwrap()) < 1e-5);
        let c = randn(&[m, k], seed + 2);
        prop_assert!(op_error(&[a.clone(), c.clone()], seed, &|g, v| g.mul(v[0], v[1]).unwrap()) < 1e-5);
        prop_assert!(op_error(&[a, c], seed, &|g, v| g.matmul_nt(v[0], v[1]).unwrap()) < 1e-5);
    }

    #[test]
    fn normalizing_op_gradients(rows in 1usize..4, cols in 2usize..7, seed in 0u64..1 << 40) {
        let x = randn(&[rows, cols], seed);
        prop_assert!(op_error(&[x.clone()], seed, &|g, v| g.softmax_last(v[0]).unwrap()) < 1e-5);
        let (gamma, beta) = (randn(&[cols], seed + 1), randn(&[cols], seed + 2));
        prop_assert!(op_error(&[x.clone(), gamma, beta], seed, &|g, v| g.layer_norm(v[0], v[1], v[2]).unwrap()) < 1e-5);
        prop_assert!(op_error(&[x.clone()], seed, &|g, v| g.gelu(v[0])) < 1e-5);
        prop_assert!(op_error(&[x.clone()], seed, &|g, v| g.tanh(v[0])) < 1e-5);
        prop_assert!(op_error(&[x], seed, &|g, v| g.mean_rows(v[0]).unwrap()) < 1e-5);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..60.0, seed in 0u64..1 << 40) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::randn(&[rows, cols], scale, &mut ChaCha8Rng::seed_from_u64(seed)));
        let s = g.softmax_last(x).unwrap();
        for sum in row_sums(&g, s) {
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }
        prop_assert!(g.value(s).iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn using_a_value_twice_doubles_its_gradient(seed in 0u64..1 << 40) {
        let store = ParamStore::new();
        let x = randn(&[3, 4], seed);
        let grad_of = |twice: bool| {
            let mut g = Graph::new(&store);
            let v = g.input(x.clone());
            let y = g.gelu(v);
            let once = g.sum_all(y);
            let l = if twice { g.add(once, once).unwrap() } else { once };
            g.backward(l).unwrap().wrt(v).unwrap().to_vec()
        };
        let (one, two) = (grad_of(false), grad_of(true));
        for (a, b) in one.iter().zip(&two) {
            prop_assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn loop_padding_stays_in_range(frames in 1usize..6, t in 1usize..5, n in 1usize..5) {
        let plan = sample_clip_indices(frames, t, n).unwrap();
        prop_assert!(plan.indices().all(|i| i < frames));
        prop_assert_eq!(plan, sample_clip_indices(frames, t, n).unwrap());
    }

    #[test]
    fn hinge_is_zero_iff_margins_hold(scores in proptest::collection::vec(-3.0f64..3.0, 2..6), pick in 0usize..6) {
        let c = pick % scores.len();
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let s = g.constant(Tensor::new(vec![1, scores.len()], scores.clone()).unwrap());
        let l = hinge_loss(&mut g, s, c).unwrap();
        let margins_hold = scores.iter().enumerate().all(|(k, &v)| k == c || scores[c] - v >= 1.0);
        prop_assert_eq!(g.scalar(l) == 0.0, margins_hold);
    }

    #[test]
    fn count_predictions_stay_in_range(raw in -100.0f64..100.0, lo in -3i64..3, span in 0i64..10) {
        let v = count_predict(raw, lo, lo + span);
        prop_assert!(v >= lo && v <= lo + span);
    }

    #[test]
    fn open_ended_probs_are_a_distribution(classes in 2usize..12, seed in 0u64..1 << 40) {
        let mut store = ParamStore::new();
        let head = OpenEndedHead::new(&mut store, 8, classes, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut g = Graph::new(&store);
        let o = g.constant(Tensor::randn(&[8], 3.0, &mut ChaCha8Rng::seed_from_u64(seed + 1)));
        let p = head.probs(&mut g, o).unwrap();
        prop_assert!((g.value(p).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(g.value(p).iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn fused_feature_is_a_convex_combination(levels in 1usize..5, seed in 0u64..1 << 40) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rs: Vec<Var> = (0..levels).map(|l| g.constant(Tensor::randn(&[l + 1, 4], 2.0, &mut rng))).collect();
        let qs: Vec<Var> = (0..levels).map(|_| g.constant(Tensor::randn(&[3, 4], 2.0, &mut rng))).collect();
        let f = fuse_levels(&mut g, &qs, &rs, 1.0).unwrap();
        let alpha = g.value(f.alpha).to_vec();
        prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for j in 0..4 {
            let pooled: Vec<f64> = rs
                .iter()
                .map(|&r| {
                    let v = g.value(r);
                    v.chunks(4).map(|row| row[j]).sum::<f64>() / (v.len() / 4) as f64
                })
                .collect();
            let expect: f64 = alpha.iter().zip(&pooled).map(|(a, p)| a * p).sum();
            let lo = pooled.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = pooled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = g.value(f.o)[j];
            prop_assert!((o - expect).abs() < 1e-12);
            prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
        }
    }

    #[test]
    fn forward_and_gradients_are_deterministic(seed in 0u64..1000) {
        let (m, store) = tiny_model(2, true, AnswerSpace::Count { min: 1, max: 4 }, seed);
        let rec = FeatureRecord::new("v", randn(&[6, 5], seed), randn(&[6, 3], seed + 1)).unwrap();
        let sample = mhn::model::Sample { video: m.prepare(&rec).unwrap(), question: vec![3, 4, 5], candidates: vec![], target: mhn::model::Target::Count(2) };
        let run = || {
            let mut g = Graph::new(&store);
            let (l, _) = m.loss(&mut g, &sample).unwrap();
            let grads = g.backward(l).unwrap();
            let flat: Vec<u64> = grads.params().flat_map(|(_, v)| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect();
            (g.scalar(l).to_bits(), flat)
        };
        prop_assert_eq!(run(), run());
    }
}
