//! Experiment configuration.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use upcycle_core::lora::RankScale;
use upcycle_core::merging::default_grid;
use upcycle_core::{MergeConfig, MergeMethod};
use upcycle_train::optim::EarlyStopConfig;
use upcycle_train::synthetic::default_tasks;
use upcycle_train::TaskSpec;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Fft,
    Lora,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fft => "fft",
            Mode::Lora => "lora",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub peak_lr_fft: f64,
    pub peak_lr_lora: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub top_k: usize,
    pub post_train_steps: usize,
    pub peak_lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyConfig {
    pub probe_step: usize,
    pub n_seeds: usize,
    pub n_bins: usize,
    /// Max EL2N percentiles kept in the pruning sweep.
    pub prune_percentiles: Vec<f64>,
    /// Durations whose experts are retrained on pruned data; empty means
    /// the longest duration only.
    #[serde(default)]
    pub prune_durations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopRun {
    #[serde(flatten)]
    pub controller: EarlyStopConfig,
    /// Step budget; 0 means the longest sweep duration.
    #[serde(default)]
    pub max_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Task templates. Each experiment seed re-derives the data seeds, so
    /// every seed sees a fresh draw of the benchmark.
    pub tasks: Vec<TaskSpec>,
    pub mode: Mode,
    /// (rank, scale) pairs; the first one is used outside the rank sweep.
    pub lora_pairs: Vec<RankScale>,
    pub durations: Vec<usize>,
    pub methods: Vec<MergeMethod>,
    /// Explicit tuning grids; methods without an entry use the default grid.
    #[serde(default)]
    pub merge_grid: Vec<MergeConfig>,
    pub hidden: Vec<usize>,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub moe: MoeConfig,
    pub difficulty: DifficultyConfig,
    pub early_stop: EarlyStopRun,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Write every expert checkpoint to disk.
    #[serde(default)]
    pub save_checkpoints: bool,
}

/// Rank/scale pairs with scale = 32 · sqrt(rank / 8), limited to ranks that
/// fit the default 32→64→64 backbone.
pub fn desk_rank_pairs() -> Vec<RankScale> {
    [(2, 16.0), (4, 23.0), (8, 32.0), (16, 45.0), (32, 64.0)]
        .into_iter()
        .map(|(rank, scale)| RankScale { rank, scale })
        .collect()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            tasks: default_tasks(4, 0),
            mode: Mode::Fft,
            lora_pairs: vec![RankScale { rank: 8, scale: 32.0 }],
            durations: vec![16, 32, 64, 128, 256, 512, 1024],
            methods: MergeMethod::ALL.to_vec(),
            merge_grid: Vec::new(),
            hidden: vec![64, 64],
            pretrain: PretrainConfig {
                steps: 50,
                batch_size: 64,
                peak_lr: 3e-3,
                weight_decay: 0.0,
            },
            finetune: FinetuneConfig {
                batch_size: 32,
                peak_lr_fft: 3e-3,
                peak_lr_lora: 3e-3,
                weight_decay: 0.0,
                warmup_frac: 0.1,
            },
            moe: MoeConfig {
                top_k: 2,
                post_train_steps: 400,
                peak_lr: 1e-3,
                batch_size: 32,
            },
            difficulty: DifficultyConfig {
                probe_step: 32,
                n_seeds: 5,
                n_bins: 10,
                prune_percentiles: vec![100.0, 99.0, 98.0, 95.0, 90.0],
                prune_durations: Vec::new(),
            },
            early_stop: EarlyStopRun {
                controller: EarlyStopConfig::default(),
                max_steps: 0,
            },
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("runs/default"),
            save_checkpoints: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        let ids: BTreeSet<&str> = self.tasks.iter().map(|t| t.task_id.as_str()).collect();
        if ids.len() != self.tasks.len() {
            return bad("task ids must be unique".into());
        }
        for t in &self.tasks {
            t.validate()?;
            if t.input_dim != self.tasks[0].input_dim {
                return bad("all tasks must share input_dim".into());
            }
        }
        if self.seeds.is_empty() {
            return bad("seeds must be nonempty".into());
        }
        if self.durations.windows(2).any(|w| w[0] >= w[1]) || self.durations.is_empty() {
            return bad("durations must be nonempty and strictly increasing".into());
        }
        if self.methods.is_empty() {
            return bad("at least one merge method is required".into());
        }
        if self.lora_pairs.is_empty() {
            return bad("at least one (rank, scale) pair is required".into());
        }
        for p in &self.lora_pairs {
            p.validate()?;
        }
        if self.hidden.is_empty() {
            return bad("hidden must list at least one layer width".into());
        }
        for cfg in &self.merge_grid {
            cfg.validate()?;
        }
        if self.difficulty.n_seeds == 0 || self.difficulty.n_bins == 0 {
            return bad("difficulty n_seeds and n_bins must be positive".into());
        }
        if self
            .difficulty
            .prune_percentiles
            .iter()
            .any(|&p| !(p > 0.0 && p <= 100.0))
        {
            return bad("prune percentiles must lie in (0, 100]".into());
        }
        self.early_stop.controller.validate()?;
        if !(1..=self.tasks.len()).contains(&self.moe.top_k) {
            return bad(format!("moe.top_k must lie in 1..={}", self.tasks.len()));
        }
        Ok(())
    }

    pub fn max_duration(&self) -> usize {
        *self.durations.last().expect("validated nonempty")
    }

    pub fn early_stop_budget(&self) -> usize {
        if self.early_stop.max_steps == 0 {
            self.max_duration()
        } else {
            self.early_stop.max_steps
        }
    }

    pub fn grid(&self, method: MergeMethod, seed: u64) -> Vec<MergeConfig> {
        let explicit: Vec<MergeConfig> = self
            .merge_grid
            .iter()
            .filter(|c| c.method == method)
            .copied()
            .collect();
        if explicit.is_empty() {
            default_grid(method, seed)
        } else {
            explicit
        }
    }

    /// Rank pairs with duplicates removed (first occurrence kept). Returns
    /// the removed duplicates for reporting.
    pub fn dedup_pairs(&self) -> (Vec<RankScale>, Vec<RankScale>) {
        let mut seen = Vec::new();
        let mut dups = Vec::new();
        for p in &self.lora_pairs {
            if seen.contains(p) {
                dups.push(*p);
            } else {
                seen.push(*p);
            }
        }
        (seen, dups)
    }

    /// SHA-256 over the canonical JSON form with the output directory
    /// removed, so moving a run does not invalidate it.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
