use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TaskKind;
use crate::error::Result;
use crate::model::{Mhn, Prediction, Target};
use crate::tensor::{Graph, ParamStore};

use super::dataset::SplitSamples;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub samples: usize,
    pub loss: f64,
    /// Classification and multi-choice accuracy.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// Count: mean squared error of the rounded, clamped predictions.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    /// Count: MSE of always predicting the median answer of the split.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_mse: Option<f64>,
    /// Accuracy per task when several open-ended tasks are mixed.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_task: BTreeMap<TaskKind, f64>,
}

impl EvalMetrics {
    /// The model-selection metric: accuracy, or MSE for counting.
    pub fn primary(&self) -> f64 {
        self.accuracy.or(self.mse).unwrap_or(f64::NAN)
    }

    pub fn higher_is_better(&self) -> bool {
        self.accuracy.is_some()
    }

    /// `true` if `self` beats `other` on the primary metric.
    pub fn better_than(&self, other: &EvalMetrics) -> bool {
        if self.higher_is_better() {
            self.primary() > other.primary()
        } else {
            self.primary() < other.primary()
        }
    }
}

/// Lower median of a non-empty integer list.
pub fn median(values: &[i64]) -> i64 {
    let mut v = values.to_vec();
    v.sort_unstable();
    v[(v.len() - 1) / 2]
}

/// Per-sample loss and prediction, computed in parallel and returned in input order.
pub fn run_forward(
    model: &Mhn,
    store: &ParamStore,
    split: &SplitSamples,
) -> Result<Vec<(f64, Prediction)>> {
    split
        .samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::new(store);
            let (loss, pred) = model.loss(&mut g, s)?;
            Ok((g.scalar(loss), pred))
        })
        .collect()
}

pub fn evaluate(model: &Mhn, store: &ParamStore, split: &SplitSamples) -> Result<EvalMetrics> {
    let outs = run_forward(model, store, split)?;
    let n = outs.len();
    let loss = outs.iter().map(|(l, _)| l).sum::<f64>() / n.max(1) as f64;
    let mut metrics = EvalMetrics {
        samples: n,
        loss,
        accuracy: None,
        mse: None,
        baseline_mse: None,
        per_task: BTreeMap::new(),
    };
    if n == 0 {
        return Ok(metrics);
    }
    let mut hits = 0usize;
    let mut per_task: BTreeMap<TaskKind, (usize, usize)> = BTreeMap::new();
    let mut sq = 0.0;
    let mut counts = Vec::new();
    for ((_, pred), (s, &task)) in outs.iter().zip(split.samples.iter().zip(&split.tasks)) {
        match (*pred, s.target) {
            (Prediction::Count { value, .. }, Target::Count(c)) => {
                sq += ((value - c) as f64).powi(2);
                counts.push(c);
            }
            (p, t) => {
                let ok = matches!((p, t), (Prediction::Class(a), Target::Class(b)) if a == b)
                    || matches!((p, t), (Prediction::Choice(a), Target::Choice(b)) if a == b);
                hits += usize::from(ok);
                let e = per_task.entry(task).or_default();
                e.0 += usize::from(ok);
                e.1 += 1;
            }
        }
    }
    if counts.is_empty() {
        metrics.accuracy = Some(hits as f64 / n as f64);
        if per_task.len() > 1 {
            metrics.per_task = per_task
                .into_iter()
                .map(|(t, (h, c))| (t, h as f64 / c as f64))
                .collect();
        }
    } else {
        metrics.mse = Some(sq / n as f64);
        let m = median(&counts);
        metrics.baseline_mse = Some(
            counts
                .iter()
                .map(|&c| ((c - m) as f64).powi(2))
                .sum::<f64>()
                / n as f64,
        );
    }
    Ok(metrics)
}
