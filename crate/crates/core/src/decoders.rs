//! Answer decoders and their losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MhnError, Result};
use crate::layers::Linear;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnswerSpace {
    OpenEnded { classes: Vec<String> },
    Count { min: i64, max: i64 },
    MultiChoice { k: usize },
}

impl AnswerSpace {
    pub fn validate(&self) -> Result<()> {
        match self {
            AnswerSpace::OpenEnded { classes } => {
                if classes.len() < 2 {
                    return Err(MhnError::Config(format!(
                        "answer_space.classes needs at least 2 entries, got {}",
                        classes.len()
                    )));
                }
                let mut seen = std::collections::HashSet::new();
                if let Some(dup) = classes.iter().find(|c| !seen.insert(c.as_str())) {
                    return Err(MhnError::Config(format!(
                        "answer_space.classes repeats {dup:?}"
                    )));
                }
            }
            AnswerSpace::Count { min, max } => {
                if min > max {
                    return Err(MhnError::Config(format!(
                        "answer_space.min ({min}) exceeds answer_space.max ({max})"
                    )));
                }
            }
            AnswerSpace::MultiChoice { k } => {
                if *k < 2 {
                    return Err(MhnError::Config(format!(
                        "answer_space.k must be at least 2, got {k}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AnswerSpace::OpenEnded { .. } => "open_ended",
            AnswerSpace::Count { .. } => "count",
            AnswerSpace::MultiChoice { .. } => "multi_choice",
        }
    }
}

/// `P = softmax(W_y GELU(W_o o + b_o) + b_y)`.
#[derive(Debug, Clone)]
pub struct OpenEndedHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl OpenEndedHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(MhnError::Config(format!(
                "open-ended decoding needs at least 2 classes, got {classes}"
            )));
        }
        Ok(OpenEndedHead {
            hidden: Linear::new(store, "decoder.open.hidden", d, d, true, rng)?,
            out: Linear::new(store, "decoder.open.out", d, classes, true, rng)?,
        })
    }

    /// Class logits `[1 x |A|]` for an answer feature `o: [d]`.
    pub fn logits(&self, g: &mut Graph<'_>, o: Var) -> Result<Var> {
        let d = self.hidden.in_dim;
        let o = g.reshape(o, &[1, d])?;
        let y = self.hidden.forward(g, o)?;
        let y = g.gelu(y);
        self.out.forward(g, y)
    }

    pub fn probs(&self, g: &mut Graph<'_>, o: Var) -> Result<Var> {
        let logits = self.logits(g, o)?;
        g.softmax_last(logits)
    }
}

/// Scalar regression output in place of the classification layer.
#[derive(Debug, Clone)]
pub struct CountHead {
    pub out: Linear,
}

impl CountHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, rng: &mut R) -> Result<Self> {
        Ok(CountHead {
            out: Linear::new(store, "decoder.count.out", d, 1, true, rng)?,
        })
    }

    /// Un-rounded regression output, shape `[]`.
    pub fn raw(&self, g: &mut Graph<'_>, o: Var) -> Result<Var> {
        let d = self.out.in_dim;
        let o = g.reshape(o, &[1, d])?;
        let y = self.out.forward(g, o)?;
        g.reshape(y, &[])
    }
}

/// Rounds half away from zero, then clamps into `[min, max]`.
pub fn count_predict(raw: f64, min: i64, max: i64) -> i64 {
    let r = raw.round();
    if r.is_nan() {
        return min;
    }
    (r.clamp(min as f64, max as f64)) as i64
}

/// Two-layer scoring head over `[o_q; o_a^k]`.
#[derive(Debug, Clone)]
pub struct MultiChoiceHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl MultiChoiceHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, rng: &mut R) -> Result<Self> {
        Ok(MultiChoiceHead {
            hidden: Linear::new(store, "decoder.choice.hidden", 2 * d, d, true, rng)?,
            out: Linear::new(store, "decoder.choice.out", d, 1, true, rng)?,
        })
    }

    /// Candidate scores `[1 x K]`.
    pub fn scores(&self, g: &mut Graph<'_>, o_q: Var, o_a: &[Var]) -> Result<Var> {
        if o_a.len() < 2 {
            return Err(MhnError::Config(format!(
                "multi-choice scoring needs at least 2 candidates, got {}",
                o_a.len()
            )));
        }
        let d = self.out.in_dim;
        let q = g.reshape(o_q, &[1, d])?;
        let mut rows = Vec::with_capacity(o_a.len());
        for &a in o_a {
            let a = g.reshape(a, &[1, d])?;
            rows.push(g.concat_cols(&[q, a])?);
        }
        let x = g.concat_rows(&rows)?;
        let y = self.hidden.forward(g, x)?;
        let y = g.gelu(y);
        let p = self.out.forward(g, y)?;
        g.reshape(p, &[1, o_a.len()])
    }
}

/// `sum_{k != c} max(0, 1 + p_k - p_c)` over scores `[1 x K]`.
pub fn hinge_loss(g: &mut Graph<'_>, scores: Var, correct: usize) -> Result<Var> {
    let k = *g.shape(scores).last().unwrap_or(&0);
    if correct >= k {
        return Err(MhnError::Contract(format!(
            "correct index {correct} out of range for {k} candidates"
        )));
    }
    let flat = g.reshape(scores, &[1, k])?;
    let pc = g.slice_cols(flat, correct, 1)?;
    let ones = g.constant(Tensor::filled(&[1, k], 1.0));
    let pc_row = g.matmul(pc, ones)?;
    let margin = g.sub(flat, pc_row)?;
    let margin = g.add_const(margin, 1.0);
    let hinge = g.relu(margin);
    let mut mask = vec![1.0; k];
    mask[correct] = 0.0;
    let mask = g.constant(Tensor::new(vec![1, k], mask)?);
    let masked = g.mul(hinge, mask)?;
    Ok(g.sum_all(masked))
}

/// Squared error `(pred - target)^2` for a scalar prediction.
pub fn mse(g: &mut Graph<'_>, pred: Var, target: f64) -> Result<Var> {
    let n = g.value(pred).len();
    if n != 1 {
        return Err(MhnError::dim("mse", g.shape(pred), &[]));
    }
    let pred = g.reshape(pred, &[])?;
    let diff = g.add_const(pred, -target);
    g.mul(diff, diff)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check::{numeric_grad, rel_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hinge_value(p: &[f64], c: usize) -> f64 {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let s = g.constant(Tensor::new(vec![1, p.len()], p.to_vec()).unwrap());
        let l = hinge_loss(&mut g, s, c).unwrap();
        g.scalar(l)
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge_value(&[2.0, 0.5], 0), 0.0);
        assert_eq!(hinge_value(&[0.0, 0.0], 0), 1.0);
        assert_eq!(hinge_value(&[0.0, 1.0, 2.0], 0), 5.0);
    }

    #[test]
    fn hinge_gradient_matches_differences() {
        let x = Tensor::new(vec![1, 4], vec![0.3, -0.2, 0.9, 0.25]).unwrap();
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let v = g.input(x.clone());
        let l = hinge_loss(&mut g, v, 1).unwrap();
        let grads = g.backward(l).unwrap();
        let analytic = grads.wrt(v).unwrap().to_vec();
        let numeric = numeric_grad(&x, 1e-6, |t| hinge_value(&t.data, 1));
        assert!(rel_error(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn hinge_rejects_bad_index() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let s = g.constant(Tensor::zeros(&[1, 3]));
        assert!(hinge_loss(&mut g, s, 3).is_err());
    }

    #[test]
    fn count_rounding_and_clamp() {
        assert_eq!(count_predict(3.4, 1, 10), 3);
        assert_eq!(count_predict(12.7, 1, 10), 10);
        assert_eq!(count_predict(0.2, 1, 10), 1);
        assert_eq!(count_predict(2.5, 1, 10), 3);
        assert_eq!(count_predict(-2.5, -10, 10), -3);
    }

    #[test]
    fn mse_value_and_gradient() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let p = g.input(Tensor::scalar(2.5));
        let l = mse(&mut g, p, 4.0).unwrap();
        assert_eq!(g.scalar(l), 2.25);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(p).unwrap(), &[-3.0]);
    }

    #[test]
    fn zero_weights_give_uniform_probs() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = OpenEndedHead::new(&mut store, 8, 5, &mut rng).unwrap();
        head.hidden.zero(&mut store);
        head.out.zero(&mut store);
        let mut g = Graph::new(&store);
        let o = g.constant(Tensor::randn(&[8], 1.0, &mut rng));
        let p = head.probs(&mut g, o).unwrap();
        for v in g.value(p) {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn probs_sum_to_one() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = OpenEndedHead::new(&mut store, 8, 7, &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let o = g.constant(Tensor::randn(&[8], 3.0, &mut rng));
        let p = head.probs(&mut g, o).unwrap();
        assert!((g.value(p).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_candidates_tie_to_lowest_index() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = MultiChoiceHead::new(&mut store, 8, &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let q = g.constant(Tensor::randn(&[8], 1.0, &mut rng));
        let a = g.constant(Tensor::randn(&[8], 1.0, &mut rng));
        let s = head.scores(&mut g, q, &[a, a, a, a, a]).unwrap();
        assert_eq!(g.shape(s), &[1, 5]);
        let v = g.value(s);
        assert!(v.iter().all(|&x| x == v[0]));
        assert_eq!(argmax(v), 0);
        assert!(head.scores(&mut g, q, &[a]).is_err());
    }

    #[test]
    fn answer_space_validation() {
        assert!(AnswerSpace::MultiChoice { k: 1 }.validate().is_err());
        assert!(AnswerSpace::Count { min: 3, max: 2 }.validate().is_err());
        let dup = AnswerSpace::OpenEnded {
            classes: vec!["a".into(), "a".into()],
        };
        assert!(dup.validate().is_err());
        let json = serde_json::to_string(&AnswerSpace::Count { min: 1, max: 10 }).unwrap();
        assert_eq!(json, r#"{"kind":"count","min":1,"max":10}"#);
    }
}
