use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::save_checkpoint;
use crate::error::{MhnError, Result};
use crate::model::{Mhn, ParamBreakdown};
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, ParamStore};

use super::config::{LrSchedule, OptimConfig, RunConfig};
use super::dataset::{load_splits, SplitSamples, TaskData};
use super::eval::{evaluate, EvalMetrics};

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_mse: Option<f64>,
    pub lr: f64,
    pub wall_time_s: f64,
}

impl EpochLog {
    /// JSON line without the wall-clock field, for reproducibility comparisons.
    pub fn deterministic_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("log serializes");
        v.as_object_mut().expect("object").remove("wall_time_s");
        v.to_string()
    }
}

/// Learning-rate halving on a validation-loss plateau, or on a fixed cadence.
#[derive(Debug, Clone)]
pub struct LrScheduler {
    schedule: LrSchedule,
    patience: usize,
    min_rel: f64,
    best: f64,
    stale: usize,
    pub lr: f64,
}

impl LrScheduler {
    pub fn new(cfg: &OptimConfig) -> Self {
        LrScheduler {
            schedule: cfg.schedule,
            patience: cfg.patience,
            min_rel: cfg.min_rel_improvement,
            best: f64::INFINITY,
            stale: 0,
            lr: cfg.lr,
        }
    }

    /// Feeds one epoch's validation loss; returns `true` when the rate was halved.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        let halve = match self.schedule {
            LrSchedule::Fixed => epoch % self.patience == 0,
            LrSchedule::Plateau => {
                if self.best.is_infinite() || val_loss < self.best - self.min_rel * self.best.abs()
                {
                    self.best = val_loss;
                    self.stale = 0;
                    false
                } else {
                    self.stale += 1;
                    if self.stale >= self.patience {
                        self.stale = 0;
                        true
                    } else {
                        false
                    }
                }
            }
        };
        if halve {
            self.lr *= 0.5;
        }
        halve
    }
}

/// Result of a training run. `store` holds the best-validation parameters.
pub struct TrainOutcome {
    pub model: Mhn,
    pub store: ParamStore,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val: EvalMetrics,
    pub test: Option<EvalMetrics>,
    pub params: ParamBreakdown,
}

#[derive(Debug, Clone, Serialize)]
struct Summary<'a> {
    best_epoch: usize,
    best_val: &'a EvalMetrics,
    test: &'a Option<EvalMetrics>,
    params: &'a ParamBreakdown,
}

/// Loads data, trains, keeps the best-validation parameters and evaluates them on the test split.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let data = TaskData::load(&config.data.dir, &config.data.tasks)?;
    let (model, store) = Mhn::new(data.spec(&config.model), config.seed)?;
    let mut splits = load_splits(&model, &data, &config.data, &["train", "val", "test"])?;
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train_split = splits.pop().expect("three splits");
    train_on(config, model, store, &train_split, &val, Some(&test))
}

/// Training loop over already prepared splits.
pub fn train_on(
    config: &RunConfig,
    model: Mhn,
    mut store: ParamStore,
    train: &SplitSamples,
    val: &SplitSamples,
    test: Option<&SplitSamples>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(MhnError::Config(format!(
            "training needs non-empty train and val splits (got {} and {})",
            train.len(),
            val.len()
        )));
    }
    let o = &config.optimizer;
    let out_dir = config.out.clone();
    let mut log_file = match &out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| MhnError::io(dir, e))?;
            crate::data::qa::write_json(dir.join("config.json"), config)?;
            let p = dir.join("metrics.jsonl");
            Some((
                BufWriter::new(File::create(&p).map_err(|e| MhnError::io(&p, e))?),
                p,
            ))
        }
        None => None,
    };

    let mut adam = AdamState::new(
        &store,
        AdamConfig {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
        },
    );
    let mut sched = LrScheduler::new(o);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(usize, EvalMetrics, ParamStore)> = None;
    let start = Instant::now();
    let mut step = 0u64;

    for epoch in 1..=o.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(o.batch_size) {
            store.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let grads = {
                    let mut g = Graph::new(&store);
                    let (loss, _) = model.loss(&mut g, &train.samples[i])?;
                    total += g.scalar(loss);
                    g.backward(loss)?
                };
                store.accumulate(&grads, scale);
            }
            adam.config.lr = sched.lr;
            adam_step(&mut store, &mut adam)?;
            step += 1;
        }
        let train_loss = total / train.len() as f64;
        let metrics = evaluate(&model, &store, val)?;
        let entry = EpochLog {
            epoch,
            train_loss,
            val_loss: metrics.loss,
            val_accuracy: metrics.accuracy,
            val_mse: metrics.mse,
            lr: sched.lr,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        sched.observe(epoch, metrics.loss);
        if let Some((w, p)) = &mut log_file {
            let line = serde_json::to_string(&entry).map_err(|e| MhnError::json(p.as_path(), e))?;
            writeln!(w, "{line}").map_err(|e| MhnError::io(p.as_path(), e))?;
            w.flush().map_err(|e| MhnError::io(p.as_path(), e))?;
        }
        log.push(entry);

        let improved = best
            .as_ref()
            .map_or(true, |(_, b, _)| metrics.better_than(b));
        if improved {
            if let Some(dir) = &out_dir {
                save_checkpoint(best_path(dir), &model.spec, &store, step)?;
            }
            best = Some((epoch, metrics.clone(), store.clone()));
        }
        let (best_epoch, best_metrics, _) = best.as_ref().expect("set above");
        let reached = o.stop_at.is_some_and(|t| {
            if best_metrics.higher_is_better() {
                best_metrics.primary() >= t
            } else {
                best_metrics.primary() <= t
            }
        });
        let stalled = o.early_stop.is_some_and(|p| epoch - best_epoch >= p);
        if reached || stalled {
            break;
        }
    }

    let (best_epoch, best_val, mut best_store) = best.expect("at least one epoch");
    best_store.clear_grads();
    let test = test.map(|t| evaluate(&model, &best_store, t)).transpose()?;
    let params = model.param_breakdown(&best_store);
    if let Some(dir) = &out_dir {
        let summary = Summary {
            best_epoch,
            best_val: &best_val,
            test: &test,
            params: &params,
        };
        crate::data::qa::write_json(dir.join("summary.json"), &summary)?;
    }
    Ok(TrainOutcome {
        model,
        store: best_store,
        log,
        best_epoch,
        best_val,
        test,
        params,
    })
}

pub fn best_path(dir: &Path) -> PathBuf {
    dir.join("best.json")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(schedule: LrSchedule) -> OptimConfig {
        OptimConfig {
            lr: 1.0,
            patience: 3,
            schedule,
            ..OptimConfig::default()
        }
    }

    #[test]
    fn plateau_halves_after_patience_flat_epochs() {
        let mut s = LrScheduler::new(&cfg(LrSchedule::Plateau));
        let losses = [1.0, 0.9, 0.9, 0.9, 0.9, 0.8, 0.8];
        let halved: Vec<bool> = losses
            .iter()
            .enumerate()
            .map(|(i, &l)| s.observe(i + 1, l))
            .collect();
        assert_eq!(halved, [false, false, false, false, true, false, false]);
        assert_eq!(s.lr, 0.5);
    }

    #[test]
    fn tiny_improvements_do_not_count() {
        let mut s = LrScheduler::new(&cfg(LrSchedule::Plateau));
        s.observe(1, 1.0);
        assert!(!s.observe(2, 1.0 - 1e-6));
        assert!(!s.observe(3, 1.0 - 2e-6));
        assert!(s.observe(4, 1.0 - 3e-6));
    }

    #[test]
    fn fixed_schedule_ignores_loss() {
        let mut s = LrScheduler::new(&cfg(LrSchedule::Fixed));
        let halved: Vec<bool> = (1..=7).map(|e| s.observe(e, 1.0 / e as f64)).collect();
        assert_eq!(halved, [false, false, true, false, false, true, false]);
        assert_eq!(s.lr, 0.25);
    }
}
