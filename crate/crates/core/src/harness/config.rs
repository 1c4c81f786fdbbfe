use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::TaskKind;
use crate::error::{MhnError, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Halve after `patience` epochs without validation-loss improvement.
    #[default]
    Plateau,
    /// Halve every `patience` epochs.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub schedule: LrSchedule,
    /// Relative decrease of validation loss that counts as an improvement.
    pub min_rel_improvement: f64,
    /// Stop once the validation metric reaches this value (accuracy, or MSE from above).
    pub stop_at: Option<f64>,
    /// Stop after this many epochs without a better validation metric.
    pub early_stop: Option<usize>,
}

impl Default for OptimConfig {
    /// Desk-scale defaults; the published recipe is `lr = 1e-4`, batch 32, 20 epochs.
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            max_epochs: 20,
            patience: 10,
            schedule: LrSchedule::Plateau,
            min_rel_improvement: 1e-4,
            stop_at: None,
            early_stop: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `features.mhnf`, `{train,val,test}.jsonl`, `vocab.json` and `meta.json`.
    pub dir: PathBuf,
    /// Tasks to train on. Open-ended tasks may be mixed; they share one answer space.
    pub tasks: Vec<TaskKind>,
    /// Use at most this many training records.
    pub train_limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data"),
            tasks: vec![TaskKind::FrameqaAttr],
            train_limit: None,
        }
    }
}

/// Everything one run needs; read from a single JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimConfig,
    pub data: DataConfig,
    pub seed: u64,
    /// Output directory for metrics and checkpoints.
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            optimizer: OptimConfig::default(),
            data: DataConfig::default(),
            seed: 0,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        crate::data::qa::read_json(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.optimizer;
        let err = |m: String| Err(MhnError::Config(m));
        if !(o.lr.is_finite() && o.lr >= 0.0) {
            return err(format!(
                "optimizer.lr must be finite and non-negative, got {}",
                o.lr
            ));
        }
        for (name, b) in [("optimizer.beta1", o.beta1), ("optimizer.beta2", o.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return err(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(o.eps > 0.0) {
            return err(format!("optimizer.eps must be positive, got {}", o.eps));
        }
        if o.batch_size == 0 {
            return err("optimizer.batch_size must be at least 1".into());
        }
        if o.max_epochs == 0 {
            return err("optimizer.max_epochs must be at least 1".into());
        }
        if o.patience == 0 {
            return err("optimizer.patience must be at least 1".into());
        }
        if self.data.tasks.is_empty() {
            return err("data.tasks must name at least one task".into());
        }
        let mut tasks = self.data.tasks.clone();
        tasks.sort_unstable();
        tasks.dedup();
        if tasks.len() != self.data.tasks.len() {
            return err("data.tasks lists a task twice".into());
        }
        let open = |t: &TaskKind| matches!(t, TaskKind::Action | TaskKind::FrameqaAttr);
        if tasks.len() > 1 && !tasks.iter().all(open) {
            return err(format!(
                "data.tasks {:?}: only open-ended tasks (action, frameqa_attr) can be combined",
                self.data.tasks
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"model": {"d": 32}, "seed": 4}"#).unwrap();
        assert_eq!(c.model.d, 32);
        assert_eq!(c.model.heads, ModelConfig::default().heads);
        assert_eq!(c.seed, 4);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"modle": {}}"#).is_err());
    }

    #[test]
    fn errors_name_the_field() {
        let mut c = RunConfig::default();
        c.optimizer.batch_size = 0;
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("optimizer.batch_size"));
        let mut c = RunConfig::default();
        c.data.tasks = vec![TaskKind::Count, TaskKind::Action];
        assert!(c.validate().unwrap_err().to_string().contains("data.tasks"));
        let mut c = RunConfig::default();
        c.model.heads = 5;
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("model.heads"));
    }
}
