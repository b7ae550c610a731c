//! Result rows and their CSV tables.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use upcycle_core::{MergeConfig, MergeMethod};

use crate::error::Result;

/// One expert's own-task accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertRow {
    pub task: String,
    pub steps_run: usize,
    /// Set when the early-stop controller ended the run.
    pub stop_step: Option<usize>,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ForgottenCounts {
    /// Index 0 holds examples without a bin, then bins `1..=n_bins`.
    pub by_bin: Vec<usize>,
    pub total: usize,
}

impl ForgottenCounts {
    /// Fraction of forgotten examples in the `k` hardest bins.
    pub fn top_share(&self, k: usize) -> Option<f64> {
        if self.total == 0 {
            return None;
        }
        let n = self.by_bin.len();
        let top: usize = self.by_bin[n.saturating_sub(k).max(1)..].iter().sum();
        Some(top as f64 / self.total as f64)
    }
}

/// A tuned merge evaluated on every task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRow {
    pub method: MergeMethod,
    pub config: MergeConfig,
    pub val_acc: f64,
    pub test_acc: f64,
    pub per_task_test: Vec<f64>,
    pub forgotten: ForgottenCounts,
}

/// Experts and merges of one sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub seed: u64,
    pub experts: Vec<ExpertRow>,
    pub merges: Vec<MergeRow>,
}

impl CellResult {
    pub fn mean_expert_acc(&self) -> f64 {
        self.experts.iter().map(|e| e.test_acc).sum::<f64>() / self.experts.len() as f64
    }

    pub fn merge(&self, method: MergeMethod) -> Option<&MergeRow> {
        self.merges.iter().find(|m| m.method == method)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeRow {
    pub seed: u64,
    pub top_k: usize,
    pub init: String,
    pub post_train_steps: usize,
    /// Mean test accuracy right after MoE-fication.
    pub acc_before: f64,
    pub test_acc: f64,
    pub per_task_test: Vec<f64>,
    pub base_frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub task: String,
    pub example_id: u64,
    pub label: usize,
    pub is_noisy: bool,
    pub el2n: f64,
    pub bin: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossShareRow {
    pub task: String,
    pub step: usize,
    pub shares: Vec<f64>,
    pub uniform_fallback: bool,
}

fn f(v: f64) -> String {
    format!("{v}")
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(csv::Writer::from_path(path)?)
}

/// Labels identifying a sweep column group (mode, rank, scale).
#[derive(Debug, Clone, PartialEq)]
pub struct SweepLabel {
    pub mode: String,
    pub rank: Option<usize>,
    pub scale: Option<f64>,
}

impl SweepLabel {
    fn cols(&self) -> [String; 3] {
        [
            self.mode.clone(),
            self.rank.map(|r| r.to_string()).unwrap_or_default(),
            self.scale.map(f).unwrap_or_default(),
        ]
    }
}

/// One sweep row group: label, seed, duration (or another variant tag)
/// and the cell.
pub type SweepEntry<'a> = (&'a SweepLabel, u64, String, &'a CellResult);

pub fn write_merge_report(path: &Path, task_ids: &[String], entries: &[SweepEntry]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header: Vec<String> = [
        "mode", "rank", "scale", "seed", "duration", "method", "alpha", "keep_pct", "drop_prob", "val_acc",
        "test_acc", "expert_mean_test_acc",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(task_ids.iter().map(|t| format!("test_acc_{t}")));
    w.write_record(&header)?;
    for (label, seed, dur, cell) in entries {
        for m in &cell.merges {
            let mut rec: Vec<String> = label.cols().to_vec();
            rec.extend([
                seed.to_string(),
                dur.clone(),
                m.method.to_string(),
                f(m.config.alpha),
                f(m.config.keep_pct),
                f(m.config.drop_prob),
                f(m.val_acc),
                f(m.test_acc),
                f(cell.mean_expert_acc()),
            ]);
            rec.extend(m.per_task_test.iter().map(|&v| f(v)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_experts(path: &Path, entries: &[SweepEntry]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "mode", "rank", "scale", "seed", "duration", "task", "steps_run", "stop_step", "val_acc", "test_acc",
    ])?;
    for (label, seed, dur, cell) in entries {
        for e in &cell.experts {
            let mut rec: Vec<String> = label.cols().to_vec();
            rec.extend([
                seed.to_string(),
                dur.clone(),
                e.task.clone(),
                e.steps_run.to_string(),
                e.stop_step.map(|s| s.to_string()).unwrap_or_default(),
                f(e.val_acc),
                f(e.test_acc),
            ]);
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_forgotten(path: &Path, n_bins: usize, entries: &[SweepEntry]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["mode", "seed", "duration", "method", "bin", "count", "total"])?;
    for (label, seed, dur, cell) in entries {
        for m in &cell.merges {
            for bin in 0..=n_bins {
                let count = m.forgotten.by_bin.get(bin).copied().unwrap_or(0);
                if bin == 0 && count == 0 {
                    continue;
                }
                w.write_record([
                    label.mode.clone(),
                    seed.to_string(),
                    dur.clone(),
                    m.method.to_string(),
                    bin.to_string(),
                    count.to_string(),
                    m.forgotten.total.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_scores(path: &Path, per_seed: &[(u64, &[ScoreEntry])]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["seed", "task", "example_id", "label", "is_noisy", "el2n", "bin"])?;
    for (seed, entries) in per_seed {
        for e in *entries {
            w.write_record([
                seed.to_string(),
                e.task.clone(),
                e.example_id.to_string(),
                e.label.to_string(),
                u8::from(e.is_noisy).to_string(),
                f(e.el2n),
                e.bin.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_loss_shares(path: &Path, n_bins: usize, per_seed: &[(u64, &[LossShareRow])]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header: Vec<String> = ["seed", "task", "step", "uniform_fallback"].iter().map(|s| s.to_string()).collect();
    header.extend((1..=n_bins).map(|b| format!("bin{b}")));
    w.write_record(&header)?;
    for (seed, rows) in per_seed {
        for r in *rows {
            let mut rec = vec![
                seed.to_string(),
                r.task.clone(),
                r.step.to_string(),
                u8::from(r.uniform_fallback).to_string(),
            ];
            rec.extend(r.shares.iter().map(|&v| f(v)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneEntry<'a> {
    pub seed: u64,
    pub duration: usize,
    pub max_percentile: f64,
    pub n_removed: usize,
    pub cell: &'a CellResult,
}

pub fn write_prune(path: &Path, entries: &[PruneEntry]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "seed", "duration", "max_percentile", "n_removed", "method", "test_acc", "expert_mean_test_acc",
    ])?;
    for e in entries {
        for m in &e.cell.merges {
            w.write_record([
                e.seed.to_string(),
                e.duration.to_string(),
                f(e.max_percentile),
                e.n_removed.to_string(),
                m.method.to_string(),
                f(m.test_acc),
                f(e.cell.mean_expert_acc()),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_moe(path: &Path, rows: &[(String, &MoeRow)]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "seed", "duration", "top_k", "init", "post_train_steps", "acc_before", "test_acc", "base_frozen",
    ])?;
    for (dur, r) in rows {
        w.write_record([
            r.seed.to_string(),
            dur.clone(),
            r.top_k.to_string(),
            r.init.clone(),
            r.post_train_steps.to_string(),
            f(r.acc_before),
            f(r.test_acc),
            u8::from(r.base_frozen).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of the early-stopping comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopRow {
    pub method: String,
    /// `longest`, `best` or `early_stop`.
    pub row: String,
    pub label: String,
    pub duration: Option<usize>,
    pub per_seed: Vec<(u64, f64)>,
}

impl EarlyStopRow {
    pub fn mean(&self) -> f64 {
        self.per_seed.iter().map(|(_, v)| v).sum::<f64>() / self.per_seed.len() as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        let n = self.per_seed.len() as f64;
        (self.per_seed.iter().map(|(_, v)| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
    }
}

pub fn write_early_stop(per_seed_path: &Path, summary_path: &Path, rows: &[EarlyStopRow]) -> Result<()> {
    let mut w = writer(per_seed_path)?;
    w.write_record(["method", "row", "label", "duration", "seed", "test_acc"])?;
    for r in rows {
        for (seed, acc) in &r.per_seed {
            w.write_record([
                r.method.clone(),
                r.row.clone(),
                r.label.clone(),
                r.duration.map(|d| d.to_string()).unwrap_or_default(),
                seed.to_string(),
                f(*acc),
            ])?;
        }
    }
    w.flush()?;
    let mut w = writer(summary_path)?;
    w.write_record(["method", "row", "label", "duration", "n_seeds", "mean_test_acc", "std_test_acc"])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.row.clone(),
            r.label.clone(),
            r.duration.map(|d| d.to_string()).unwrap_or_default(),
            r.per_seed.len().to_string(),
            f(r.mean()),
            f(r.std()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_stop_steps(path: &Path, rows: &[(u64, &ExpertRow)]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["seed", "task", "stop_step", "stopped_by_controller"])?;
    for (seed, e) in rows {
        w.write_record([
            seed.to_string(),
            e.task.clone(),
            e.steps_run.to_string(),
            u8::from(e.stop_step.is_some()).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean of `value(cell)` over seeds, per key.
pub fn mean_by<K: Ord + Clone>(items: &[(K, f64)]) -> BTreeMap<K, f64> {
    let mut acc: BTreeMap<K, (f64, usize)> = BTreeMap::new();
    for (k, v) in items {
        let e = acc.entry(k.clone()).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}
