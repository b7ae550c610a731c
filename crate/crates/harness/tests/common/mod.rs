//! Shared tiny benchmark config.

use std::path::Path;

use upcycle_core::lora::RankScale;
use upcycle_core::MergeConfig;
use upcycle_harness::config::{DifficultyConfig, ExperimentConfig};
use upcycle_train::synthetic::default_tasks;

pub fn tiny(out: &Path) -> ExperimentConfig {
    let mut tasks = default_tasks(2, 7);
    for t in &mut tasks {
        t.n_train = 200;
        t.n_val = 100;
        t.n_test = 100;
    }
    let mut cfg = ExperimentConfig {
        tasks,
        durations: vec![0, 8, 24],
        hidden: vec![16, 16],
        seeds: vec![0, 1],
        lora_pairs: vec![RankScale { rank: 4, scale: 8.0 }],
        output_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.pretrain.steps = 20;
    cfg.difficulty = DifficultyConfig {
        probe_step: 4,
        n_seeds: 2,
        n_bins: 5,
        prune_percentiles: vec![100.0, 90.0],
        prune_durations: Vec::new(),
    };
    cfg.moe.post_train_steps = 20;
    cfg.early_stop.controller.warmup_steps = 4;
    cfg.early_stop.max_steps = 40;
    // a coarse grid keeps the tuning loop short
    cfg.merge_grid = vec![
        MergeConfig::task_arithmetic(0.5),
        MergeConfig::task_arithmetic(1.0),
        MergeConfig::ties(1.0, 20.0),
        MergeConfig::dare(0.5, 0.5, 0),
    ];
    cfg
}
