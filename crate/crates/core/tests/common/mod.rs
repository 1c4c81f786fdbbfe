#![allow(dead_code)]

use std::path::Path;

use mhn::data::{generate_synthetic, SyntheticConfig, TaskKind};
use mhn::harness::RunConfig;
use mhn::model::ModelConfig;

/// Writes a small synthetic dataset into `dir`.
pub fn dataset(dir: &Path, train: usize, val: usize, test: usize, seed: u64) -> SyntheticConfig {
    let cfg = SyntheticConfig {
        train,
        val,
        test,
        seed,
        ..SyntheticConfig::default()
    };
    generate_synthetic(&cfg, dir).unwrap();
    cfg
}

/// A quick model and optimizer setup over `dir`.
pub fn small_run(dir: &Path, tasks: &[TaskKind], epochs: usize) -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelConfig {
            d: 16,
            heads: 2,
            scales: 2,
            word_dim: 8,
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    };
    cfg.data.dir = dir.to_path_buf();
    cfg.data.tasks = tasks.to_vec();
    cfg.optimizer.max_epochs = epochs;
    cfg.optimizer.batch_size = 8;
    cfg.optimizer.lr = 3e-3;
    cfg
}
