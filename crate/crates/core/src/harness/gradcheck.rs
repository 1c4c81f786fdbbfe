use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::decoders::{hinge_loss, mse, AnswerSpace, CountHead, MultiChoiceHead, OpenEndedHead};
use crate::error::Result;
use crate::layers::LayerNorm;
use crate::model::{Mhn, ModelConfig, ModelSpec, Sample, Target};
use crate::pvr::{encode_level, fuse_levels, EncoderLayer};
use crate::rmi::{
    interaction_block, mca, recurrent_align, InteractionBlock, McaWeights, Recurrence,
};
use crate::sampling::FeatureRecord;
use crate::tensor::check::rel_error;
use crate::tensor::{Faults, Graph, ParamId, ParamStore, Tensor, Var};
use crate::text::TextEncoder;

pub const THRESHOLD: f64 = 1e-4;
const STEP: f64 = 1e-5;
/// Coordinates probed per parameter tensor in the module and model checks.
const COORDS_PER_TENSOR: usize = 12;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    /// Number of scalar coordinates compared.
    pub coords: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub threshold: f64,
    pub results: Vec<CheckResult>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results
            .iter()
            .all(|r| r.max_rel_error < self.threshold)
    }

    pub fn worst(&self) -> f64 {
        self.results
            .iter()
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn table(&self) -> String {
        let width = self
            .results
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(4)
            .max(4);
        let mut s = format!(
            "{:<width$}  {:>12}  {:>6}  status\n",
            "check", "max rel err", "coords"
        );
        for r in &self.results {
            let status = if r.max_rel_error < self.threshold {
                "ok"
            } else {
                "FAIL"
            };
            s += &format!(
                "{:<width$}  {:>12.3e}  {:>6}  {status}\n",
                r.name, r.max_rel_error, r.coords
            );
        }
        s
    }
}

struct Checker {
    faults: Faults,
    rng: ChaCha8Rng,
    results: Vec<CheckResult>,
}

impl Checker {
    /// Checks gradients with respect to graph inputs. The scalar loss is
    /// `sum(out * W)` for a fixed random `W`, so every output entry matters.
    fn op(
        &mut self,
        name: &str,
        inputs: Vec<Tensor>,
        f: impl Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
    ) -> Result<()> {
        let store = ParamStore::new();
        let weight = {
            let mut g = Graph::new(&store);
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            Tensor::randn(g.shape(out), 1.0, &mut self.rng)
        };
        let loss_of = |g: &mut Graph<'_>, vars: &[Var]| -> Result<Var> {
            let out = f(g, vars)?;
            let w = g.constant(weight.clone());
            let w = g.reshape(w, &g.shape(out).to_vec())?;
            let prod = g.mul(out, w)?;
            Ok(g.sum_all(prod))
        };
        let mut g = Graph::with_faults(&store, self.faults);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = loss_of(&mut g, &vars)?;
        let grads = g.backward(loss)?;

        let mut worst: f64 = 0.0;
        let mut coords = 0;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads
                .wrt(vars[k])
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; x.numel()]);
            let mut numeric = vec![0.0; x.numel()];
            for i in 0..x.numel() {
                let eval = |delta: f64| -> Result<f64> {
                    let mut g = Graph::new(&store);
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == k {
                                t.data[i] += delta;
                            }
                            g.constant(t)
                        })
                        .collect();
                    let l = loss_of(&mut g, &vars)?;
                    Ok(g.scalar(l))
                };
                numeric[i] = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            }
            worst = worst.max(rel_error(&analytic, &numeric));
            coords += x.numel();
        }
        self.results.push(CheckResult {
            name: name.to_string(),
            max_rel_error: worst,
            coords,
        });
        Ok(())
    }

    /// Checks gradients with respect to every parameter tensor in `store` on a random coordinate subset.
    fn params(
        &mut self,
        name: &str,
        store: &mut ParamStore,
        f: impl Fn(&mut Graph<'_>) -> Result<Var>,
    ) -> Result<()> {
        let grads = {
            let mut g = Graph::with_faults(store, self.faults);
            let loss = f(&mut g)?;
            g.backward(loss)?
        };
        let ids: Vec<ParamId> = store.ids().collect();
        let mut worst: f64 = 0.0;
        let mut coords = 0;
        for id in ids {
            let n = store.get(id).numel();
            let mut picks: Vec<usize> = (0..n).collect();
            picks.shuffle(&mut self.rng);
            picks.truncate(COORDS_PER_TENSOR);
            let full = grads
                .param(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; n]);
            let analytic: Vec<f64> = picks.iter().map(|&i| full[i]).collect();
            let mut numeric = Vec::with_capacity(picks.len());
            for &i in &picks {
                let orig = store.get(id).data[i];
                let eval = |v: f64, store: &mut ParamStore| -> Result<f64> {
                    store.get_mut(id).data[i] = v;
                    let mut g = Graph::new(store);
                    let l = f(&mut g)?;
                    Ok(g.scalar(l))
                };
                let plus = eval(orig + STEP, store)?;
                let minus = eval(orig - STEP, store)?;
                store.get_mut(id).data[i] = orig;
                numeric.push((plus - minus) / (2.0 * STEP));
            }
            worst = worst.max(rel_error(&analytic, &numeric));
            coords += picks.len();
        }
        self.results.push(CheckResult {
            name: name.to_string(),
            max_rel_error: worst,
            coords,
        });
        Ok(())
    }

    fn randn(&mut self, shape: &[usize]) -> Tensor {
        Tensor::randn(shape, 1.0, &mut self.rng)
    }
}

/// Finite-difference checks of every primitive, every module and the full model at `d = 8, H = 2, N = 2, T = 2`.
pub fn gradcheck(seed: u64, faults: Faults) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut c = Checker {
        faults,
        rng: ChaCha8Rng::seed_from_u64(seed),
        results: Vec::new(),
    };
    primitives(&mut c)?;
    modules(&mut c)?;
    full_model(&mut c, seed)?;
    Ok(GradcheckReport {
        seed,
        threshold: THRESHOLD,
        results: c.results,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn primitives(c: &mut Checker) -> Result<()> {
    let (a34, b45, b54) = (c.randn(&[3, 4]), c.randn(&[4, 5]), c.randn(&[5, 4]));
    c.op("matmul", vec![a34.clone(), b45], |g, v| {
        g.matmul(v[0], v[1])
    })?;
    c.op("matmul_nt", vec![a34.clone(), b54], |g, v| {
        g.matmul_nt(v[0], v[1])
    })?;
    let b34 = c.randn(&[3, 4]);
    c.op("add", vec![a34.clone(), b34.clone()], |g, v| {
        g.add(v[0], v[1])
    })?;
    c.op("sub", vec![a34.clone(), b34.clone()], |g, v| {
        g.sub(v[0], v[1])
    })?;
    c.op("mul", vec![a34.clone(), b34.clone()], |g, v| {
        g.mul(v[0], v[1])
    })?;
    let bias = c.randn(&[4]);
    c.op("add_row", vec![a34.clone(), bias], |g, v| {
        g.add_row(v[0], v[1])
    })?;
    c.op("scale", vec![a34.clone()], |g, v| Ok(g.scale(v[0], -1.7)))?;
    c.op("add_const", vec![a34.clone()], |g, v| {
        Ok(g.add_const(v[0], 0.3))
    })?;
    let logits = Tensor::randn(&[3, 5], 2.0, &mut c.rng);
    c.op("softmax", vec![logits], |g, v| g.softmax_last(v[0]))?;
    let (x, gamma, beta) = (c.randn(&[3, 6]), c.randn(&[6]), c.randn(&[6]));
    c.op("layer_norm", vec![x, gamma, beta], |g, v| {
        g.layer_norm(v[0], v[1], v[2])
    })?;
    let wide = Tensor::randn(&[3, 4], 2.0, &mut c.rng);
    c.op("gelu", vec![wide.clone()], |g, v| Ok(g.gelu(v[0])))?;
    c.op("sigmoid", vec![wide.clone()], |g, v| Ok(g.sigmoid(v[0])))?;
    c.op("tanh", vec![wide.clone()], |g, v| Ok(g.tanh(v[0])))?;
    // Keep inputs away from the kink.
    let mut away = wide;
    away.data.iter_mut().for_each(|x| *x += 0.2 * x.signum());
    c.op("relu", vec![away], |g, v| Ok(g.relu(v[0])))?;
    c.op("mean_rows", vec![a34.clone()], |g, v| g.mean_rows(v[0]))?;
    c.op("sum_all", vec![a34.clone()], |g, v| Ok(g.sum_all(v[0])))?;
    let b32 = c.randn(&[3, 2]);
    c.op("concat_cols", vec![a34.clone(), b32], |g, v| {
        g.concat_cols(&[v[0], v[1]])
    })?;
    let b24 = c.randn(&[2, 4]);
    c.op("concat_rows", vec![a34.clone(), b24], |g, v| {
        g.concat_rows(&[v[0], v[1]])
    })?;
    c.op("slice_cols", vec![a34.clone()], |g, v| {
        g.slice_cols(v[0], 1, 2)
    })?;
    c.op("gather_rows", vec![a34.clone()], |g, v| {
        g.gather_rows(v[0], &[2, 0, 2, 1])
    })?;
    c.op("reshape", vec![a34], |g, v| g.reshape(v[0], &[2, 6]))?;
    let logits = c.randn(&[1, 5]);
    c.op("cross_entropy", vec![logits], |g, v| {
        g.cross_entropy(v[0], 2)
    })?;
    let scores = c.randn(&[1, 4]);
    c.op("hinge_loss", vec![scores], |g, v| hinge_loss(g, v[0], 1))?;
    let pred = c.randn(&[]);
    c.op("mse", vec![pred], |g, v| mse(g, v[0], 2.5))?;
    Ok(())
}

fn modules(c: &mut Checker) -> Result<()> {
    let (d, h, ff) = (8, 2, 16);
    let x = c.randn(&[5, d]);
    let q = c.randn(&[3, d]);
    let mut rng = ChaCha8Rng::seed_from_u64(c.rng.gen());

    let mut store = ParamStore::new();
    let w = McaWeights::new(&mut store, "mca", d, h, &mut rng)?;
    let ln_x = LayerNorm::new(&mut store, "ln_x", d)?;
    let ln_q = LayerNorm::new(&mut store, "ln_q", d)?;
    let (xs, qs) = (x.clone(), q.clone());
    c.params("mca", &mut store, |g| {
        let (x, q) = (g.constant(xs.clone()), g.constant(qs.clone()));
        let out = mca(g, x, q, &ln_x, &ln_q, &w)?.out;
        let sq = g.mul(out, out)?;
        Ok(g.sum_all(sq))
    })?;

    let mut store = ParamStore::new();
    let block = InteractionBlock::new(&mut store, "block", d, h, ff, &mut rng)?;
    let (xs, qs) = (x.clone(), q.clone());
    c.params("interaction_block", &mut store, |g| {
        let (x, q) = (g.constant(xs.clone()), g.constant(qs.clone()));
        let out = interaction_block(g, x, q, &block)?;
        let a = g.mul(out.x_hat, out.x_hat)?;
        let b = g.mul(out.q_hat, out.q_hat)?;
        let (a, b) = (g.sum_all(a), g.sum_all(b));
        g.add(a, b)
    })?;

    let mut store = ParamStore::new();
    let rec = Recurrence::new(&mut store, "align", d, &mut rng)?;
    let (xs, prev) = (x.clone(), c.randn(&[7, d]));
    c.params("recurrent_align", &mut store, |g| {
        let (x, p) = (g.constant(xs.clone()), g.constant(prev.clone()));
        let (out, _) = recurrent_align(g, x, p, &rec)?;
        let sq = g.mul(out, out)?;
        Ok(g.sum_all(sq))
    })?;

    let mut store = ParamStore::new();
    let enc = EncoderLayer::new(&mut store, "pvr", d, h, ff, &mut rng)?;
    let xs = x.clone();
    c.params("pvr_encoder", &mut store, |g| {
        let x = g.constant(xs.clone());
        let (r, _) = encode_level(g, x, &enc)?;
        let sq = g.mul(r, r)?;
        Ok(g.sum_all(sq))
    })?;

    let levels: Vec<Tensor> = (0..3).map(|n| c.randn(&[2 + n, d])).collect();
    let qs: Vec<Tensor> = (0..3)
        .map(|_| Tensor::randn(&[3, d], 0.5, &mut c.rng))
        .collect();
    let mut inputs = levels.clone();
    inputs.extend(qs);
    c.op("fusion", inputs, |g, v| {
        Ok(fuse_levels(g, &v[3..], &v[..3], 2.0)?.o)
    })?;

    let mut store = ParamStore::new();
    let text = TextEncoder::new(&mut store, 11, 6, d, 8, &mut rng)?;
    c.params("text_encoder", &mut store, |g| {
        let seq = text.encode(g, &[2, 7, 4, 9])?.seq;
        let sq = g.mul(seq, seq)?;
        Ok(g.sum_all(sq))
    })?;

    let o = c.randn(&[d]);
    let mut store = ParamStore::new();
    let head = OpenEndedHead::new(&mut store, d, 5, &mut rng)?;
    let os = o.clone();
    c.params("open_ended_head", &mut store, |g| {
        let o = g.constant(os.clone());
        let logits = head.logits(g, o)?;
        g.cross_entropy(logits, 3)
    })?;

    let mut store = ParamStore::new();
    let head = CountHead::new(&mut store, d, &mut rng)?;
    let os = o.clone();
    c.params("count_head", &mut store, |g| {
        let o = g.constant(os.clone());
        let raw = head.raw(g, o)?;
        mse(g, raw, 4.0)
    })?;

    let mut store = ParamStore::new();
    let head = MultiChoiceHead::new(&mut store, d, &mut rng)?;
    let cands: Vec<Tensor> = (0..4).map(|_| c.randn(&[d])).collect();
    c.params("multi_choice_head", &mut store, |g| {
        let oq = g.constant(o.clone());
        let oa: Vec<Var> = cands.iter().map(|t| g.constant(t.clone())).collect();
        let s = head.scores(g, oq, &oa)?;
        // A small scale keeps every hinge term inside its linear region at the probe points.
        let s = g.scale(s, 0.1);
        hinge_loss(g, s, 0)
    })?;
    Ok(())
}

fn full_model(c: &mut Checker, seed: u64) -> Result<()> {
    let model = ModelConfig {
        d: 8,
        heads: 2,
        scales: 2,
        window: 2,
        max_window: 2,
        word_dim: 6,
        max_tokens: 8,
        ..ModelConfig::default()
    };
    let record = FeatureRecord::new("gc", c.randn(&[8, 5]), c.randn(&[8, 4]))?;
    let cases = [
        (
            "model_open_ended",
            AnswerSpace::OpenEnded {
                classes: (0..4).map(|i| format!("c{i}")).collect(),
            },
            Target::Class(1),
        ),
        (
            "model_count",
            AnswerSpace::Count { min: 1, max: 10 },
            Target::Count(3),
        ),
        (
            "model_multi_choice",
            AnswerSpace::MultiChoice { k: 3 },
            Target::Choice(2),
        ),
    ];
    for (name, answer, target) in cases {
        let spec = ModelSpec {
            model: model.clone(),
            app_dim: 5,
            mot_dim: 4,
            vocab_size: 12,
            answer,
        };
        let (m, mut store) = Mhn::new(spec, seed)?;
        let sample = Sample {
            video: m.prepare(&record)?,
            question: vec![2, 5, 3],
            candidates: vec![vec![4, 6], vec![7], vec![8, 9, 10]],
            target,
        };
        c.params(name, &mut store, |g| Ok(m.loss(g, &sample)?.0))?;
    }
    Ok(())
}
