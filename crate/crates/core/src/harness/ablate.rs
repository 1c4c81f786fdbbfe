use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MhnError, Result};
use crate::model::{Mhn, ModelConfig};

use super::config::RunConfig;
use super::dataset::{load_splits, TaskData};
use super::eval::EvalMetrics;
use super::train::train_on;

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    SingleScale,
    ScaleOrder,
    NoRecurrence,
    HighLevelOnlyPvr,
    NoWeightSharing,
    NScales,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 6] = [
        AblationAxis::SingleScale,
        AblationAxis::ScaleOrder,
        AblationAxis::NoRecurrence,
        AblationAxis::HighLevelOnlyPvr,
        AblationAxis::NoWeightSharing,
        AblationAxis::NScales,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::SingleScale => "single_scale",
            AblationAxis::ScaleOrder => "scale_order",
            AblationAxis::NoRecurrence => "no_recurrence",
            AblationAxis::HighLevelOnlyPvr => "high_level_only_pvr",
            AblationAxis::NoWeightSharing => "no_weight_sharing",
            AblationAxis::NScales => "n_scales",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = MhnError;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = AblationAxis::ALL.iter().map(|a| a.name()).collect();
                MhnError::Config(format!(
                    "unknown ablation axis `{s}`; valid axes: {}",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub model: ModelConfig,
}

/// The reference model followed by the variants of one axis.
pub fn variants(axis: AblationAxis, base: &ModelConfig) -> Result<Vec<Variant>> {
    base.validate()?;
    let n = base.scales;
    let with = |name: String, f: &dyn Fn(&mut ModelConfig)| {
        let mut model = base.clone();
        f(&mut model);
        Variant { name, model }
    };
    let mut out = vec![with("default".into(), &|_| {})];
    match axis {
        AblationAxis::SingleScale => {
            for s in 1..=n {
                out.push(with(format!("single_scale n={s}"), &|m| {
                    m.single_scale = Some(s)
                }));
            }
        }
        AblationAxis::ScaleOrder => {
            if n < 2 {
                return Err(MhnError::Config(
                    "axis scale_order needs model.scales >= 2".into(),
                ));
            }
            // Finest scale first, then the rest in order; then fully reversed.
            let rotated: Vec<usize> = std::iter::once(n).chain(1..n).collect();
            let reversed: Vec<usize> = (1..=n).rev().collect();
            for order in [rotated, reversed] {
                let label = order
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(",");
                if out.iter().all(|v| v.model.level_order != order) {
                    out.push(with(format!("order {label}"), &|m| {
                        m.level_order = order.clone()
                    }));
                }
            }
        }
        AblationAxis::NoRecurrence => {
            out.push(with("no_recurrence".into(), &|m| m.recurrence = false))
        }
        AblationAxis::HighLevelOnlyPvr => out.push(with("high_level_only_pvr".into(), &|m| {
            m.high_level_only_pvr = true
        })),
        AblationAxis::NoWeightSharing => {
            out.push(with("no_weight_sharing".into(), &|m| m.share_pvr = false))
        }
        AblationAxis::NScales => {
            out.clear();
            for s in 2..=4 {
                out.push(with(format!("N={s}"), &|m| {
                    m.scales = s;
                    m.level_order.clear();
                    m.single_scale = None;
                }));
            }
        }
    }
    for v in &out {
        v.model.validate()?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub params: usize,
    /// Test metric per seed, in seed order.
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub seeds: Vec<u64>,
    /// `accuracy` or `mse`.
    pub metric: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn table(&self) -> String {
        let w = self
            .rows
            .iter()
            .map(|r| r.variant.len())
            .max()
            .unwrap_or(7)
            .max(7);
        let mut s = format!(
            "axis {} over {} seed(s)\n{:<w$}  {:>10}  {:>18}\n",
            self.axis,
            self.seeds.len(),
            "variant",
            "params",
            self.metric
        );
        for r in &self.rows {
            let cell = format!("{:.4} ± {:.4}", r.mean, r.std);
            s += &format!("{:<w$}  {:>10}  {:>18}\n", r.variant, r.params, cell);
        }
        s
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains every variant of `axis` once per seed and reports the test metric.
///
/// The test split is used when it has records, the validation split otherwise.
/// `progress` sees each finished run.
pub fn ablate(
    config: &RunConfig,
    axis: AblationAxis,
    seeds: &[u64],
    mut progress: impl FnMut(&str, u64, &EvalMetrics),
) -> Result<AblationReport> {
    config.validate()?;
    if seeds.is_empty() {
        return Err(MhnError::Config("ablation needs at least one seed".into()));
    }
    let data = TaskData::load(&config.data.dir, &config.data.tasks)?;
    let mut rows = Vec::new();
    let mut metric = String::new();
    for v in variants(axis, &config.model)? {
        let mut run = config.clone();
        run.model = v.model.clone();
        run.out = None;
        run.validate()?;
        let (probe, _) = Mhn::new(data.spec(&run.model), 0)?;
        let mut splits = load_splits(&probe, &data, &run.data, &["train", "val", "test"])?;
        let test = splits.pop().expect("three splits");
        let val = splits.pop().expect("three splits");
        let train = splits.pop().expect("three splits");
        let mut values = Vec::with_capacity(seeds.len());
        let mut params = 0;
        for &seed in seeds {
            run.seed = seed;
            let (model, store) = Mhn::new(data.spec(&run.model), seed)?;
            params = store.count();
            let outcome = train_on(
                &run,
                model,
                store,
                &train,
                &val,
                (!test.is_empty()).then_some(&test),
            )?;
            let m = outcome.test.unwrap_or(outcome.best_val);
            metric = if m.higher_is_better() {
                "accuracy"
            } else {
                "mse"
            }
            .to_string();
            progress(&v.name, seed, &m);
            values.push(m.primary());
        }
        let (mean, std) = mean_std(&values);
        rows.push(AblationRow {
            variant: v.name,
            params,
            values,
            mean,
            std,
        });
    }
    let report = AblationReport {
        axis,
        seeds: seeds.to_vec(),
        metric,
        rows,
    };
    if let Some(dir) = &config.out {
        std::fs::create_dir_all(dir).map_err(|e| MhnError::io(dir, e))?;
        crate::data::qa::write_json(dir.join(format!("ablation_{axis}.json")), &report)?;
    }
    Ok(report)
}
