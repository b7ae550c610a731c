//! Experiment pipelines: duration, rank and MoE sweeps, the difficulty
//! analysis and the early-stopping comparison.
//!
//! Work is split into cells keyed by (pipeline, seed, variant, method) and
//! cached through [`CellStore`]; tables are assembled afterwards in
//! canonical order, so a resumed run writes the same bytes as a fresh one.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use upcycle_core::difficulty::{
    bin_examples, forgotten_examples, loss_share_by_bin, prune_count, prune_hardest, score_dataset, DifficultyScores,
    ExampleId, PredictionPair,
};
use upcycle_core::lora::RankScale;
use upcycle_core::merging::{merge, tune};
use upcycle_core::moe::moefy;
use upcycle_core::rng::derive_seed;
use upcycle_core::store::save;
use upcycle_core::{MergeMethod, MoeModel, TaskVector};
use upcycle_train::model::ParamSet;
use upcycle_train::synthetic::{Examples, Split};
use upcycle_train::train::{Control, StepRecord};
use upcycle_train::{train, MlpModel, NoHooks, Schedule, TrainConfig, TrainHooks, Warmup};

use crate::config::{ExperimentConfig, Mode};
use crate::error::{HarnessError, Result};
use crate::manifest::CellStore;
use crate::report::{
    self, CellResult, EarlyStopRow, ExpertRow, ForgottenCounts, LossShareRow, MergeRow, MoeRow, PruneEntry,
    ScoreEntry, SweepEntry, SweepLabel,
};
use crate::setup::{build_context, prepare_run, train_expert, Expert, ExpertPlan, SeedContext, PROBE};

const MOE_TRAIN: u64 = 0x30E;
const MOE_INIT: u64 = 0xA770;

/// How the experts of one cell are trained.
#[derive(Debug, Clone, PartialEq)]
pub enum Variant {
    Fixed(usize),
    EarlyStop,
    /// Longest-style run on data with the hardest examples removed.
    Pruned { steps: usize, max_percentile: f64 },
}

impl Variant {
    fn tag(&self) -> String {
        match self {
            Variant::Fixed(d) => format!("d{d}"),
            Variant::EarlyStop => "early_stop".into(),
            Variant::Pruned { steps, max_percentile } => format!("prune{max_percentile}_d{steps}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub mode: Mode,
    pub pair: RankScale,
}

impl Sweep {
    fn prefix(&self) -> String {
        match self.mode {
            Mode::Fft => "fft".into(),
            Mode::Lora => format!("lora_r{}a{}", self.pair.rank, self.pair.scale),
        }
    }

    pub fn label(&self) -> SweepLabel {
        SweepLabel {
            mode: self.mode.as_str().into(),
            rank: (self.mode == Mode::Lora).then_some(self.pair.rank),
            scale: (self.mode == Mode::Lora).then_some(self.pair.scale),
        }
    }
}

/// Per-example difficulty of one seed's train splits.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScoresCell {
    pub entries: Vec<ScoreEntry>,
}

impl ScoresCell {
    pub fn bins(&self) -> BTreeMap<ExampleId, usize> {
        self.entries.iter().map(|e| (e.example_id, e.bin)).collect()
    }

    pub fn scores(&self, task: &str) -> DifficultyScores {
        DifficultyScores {
            scores: self
                .entries
                .iter()
                .filter(|e| e.task == task)
                .map(|e| (e.example_id, e.el2n))
                .collect(),
            probe_step: 0,
            n_seeds: 0,
        }
    }
}

#[derive(Default)]
struct SeedSlot {
    ctx: Mutex<Option<Arc<SeedContext>>>,
    scores: Mutex<Option<Arc<ScoresCell>>>,
}

/// Shared state of one invocation: config, cell cache, worker pool and the
/// per-seed contexts built on demand.
pub struct Runner {
    pub cfg: ExperimentConfig,
    pub store: CellStore,
    pool: rayon::ThreadPool,
    slots: BTreeMap<u64, SeedSlot>,
}

impl Runner {
    pub fn new(cfg: ExperimentConfig, jobs: usize, read_only: bool) -> Result<Self> {
        cfg.validate()?;
        let store = CellStore::open(&cfg.output_dir, &cfg.hash(), read_only)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
        let slots = cfg.seeds.iter().map(|&s| (s, SeedSlot::default())).collect();
        Ok(Runner {
            cfg,
            store,
            pool,
            slots,
        })
    }

    pub fn out(&self) -> &Path {
        self.store.dir()
    }

    fn slot(&self, seed: u64) -> Result<&SeedSlot> {
        self.slots
            .get(&seed)
            .ok_or_else(|| HarnessError::Config(format!("seed {seed} is not part of the config")))
    }

    pub fn context(&self, seed: u64) -> Result<Arc<SeedContext>> {
        let mut guard = self.slot(seed)?.ctx.lock().expect("context lock");
        if let Some(c) = guard.as_ref() {
            return Ok(c.clone());
        }
        let ctx = Arc::new(build_context(&self.cfg, seed)?);
        *guard = Some(ctx.clone());
        Ok(ctx)
    }

    /// EL2N scores and bins for one seed, per task.
    pub fn scores(&self, seed: u64) -> Result<Arc<ScoresCell>> {
        let mut guard = self.slot(seed)?.scores.lock().expect("scores lock");
        if let Some(s) = guard.as_ref() {
            return Ok(s.clone());
        }
        let key = format!("scores/{}/seed{seed}", self.main_sweep().prefix());
        let cell = self.store.cell(&key, || self.compute_scores(seed))?;
        let cell = Arc::new(cell);
        *guard = Some(cell.clone());
        Ok(cell)
    }

    pub fn main_sweep(&self) -> Sweep {
        Sweep {
            mode: self.cfg.mode,
            pair: self.cfg.lora_pairs[0],
        }
    }

    fn par_map<T, R, F>(&self, items: &[T], f: F) -> Result<Vec<R>>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> Result<R> + Sync + Send,
    {
        self.pool.install(|| items.par_iter().map(&f).collect())
    }

    fn compute_scores(&self, seed: u64) -> Result<ScoresCell> {
        let ctx = self.context(seed)?;
        let dcfg = &self.cfg.difficulty;
        let sweep = self.main_sweep();
        let mut entries = Vec::new();
        for (t, ds) in ctx.datasets.iter().enumerate() {
            let examples: Vec<(ExampleId, usize)> = ds.train.ids.iter().copied().zip(ds.train.labels.iter().copied()).collect();
            let probe_seeds: Vec<u64> = (0..dcfg.n_seeds as u64)
                .map(|j| derive_seed(seed, &[PROBE, t as u64, j]))
                .collect();
            let scores = score_dataset(
                |probe_seed| -> Result<Vec<Vec<f64>>> {
                    let mut plan = ExpertPlan::new(t, self.cfg.max_duration(), sweep.mode, sweep.pair);
                    plan.run_seed = Some(probe_seed);
                    let (mut model, tc) = prepare_run(&self.cfg, &ctx, &plan)?;
                    train(&mut model, &ds.train, None, &tc, &mut StopAt(dcfg.probe_step))?;
                    Ok(model.predict_proba(&ds.train)?)
                },
                &examples,
                &probe_seeds,
                dcfg.probe_step,
            )?;
            let bins = bin_examples(&scores, dcfg.n_bins)?;
            for (i, &(id, label)) in examples.iter().enumerate() {
                entries.push(ScoreEntry {
                    task: ctx.task_ids[t].clone(),
                    example_id: id,
                    label,
                    is_noisy: ds.train.is_noisy[i],
                    el2n: scores.scores[&id],
                    bin: bins[&id],
                });
            }
        }
        Ok(ScoresCell { entries })
    }

    /// Trains one expert per task for `variant`.
    pub fn train_experts(&self, ctx: &SeedContext, sweep: &Sweep, variant: &Variant) -> Result<(Vec<Expert>, usize)> {
        let mut n_removed = 0;
        let mut experts = Vec::with_capacity(ctx.task_ids.len());
        for t in 0..ctx.task_ids.len() {
            let mut plan = match variant {
                Variant::Fixed(d) => ExpertPlan::new(t, *d, sweep.mode, sweep.pair),
                Variant::EarlyStop => {
                    let mut p = ExpertPlan::new(t, self.cfg.early_stop_budget(), sweep.mode, sweep.pair);
                    p.early_stop = true;
                    p
                }
                Variant::Pruned { steps, .. } => ExpertPlan::new(t, *steps, sweep.mode, sweep.pair),
            };
            if let Variant::Pruned { max_percentile, .. } = variant {
                let pct = 100.0 - max_percentile;
                if pct > 0.0 {
                    let scores = self.scores(ctx.seed)?.scores(&ctx.task_ids[t]);
                    let train = &ctx.datasets[t].train;
                    let (kept, removed) = prune_hardest(&train.ids, &scores, pct)?;
                    n_removed += removed.len();
                    let keep: BTreeSet<u64> = kept.into_iter().collect();
                    plan.train_override = Some(train.retain_ids(&keep));
                }
            }
            experts.push(train_expert(&self.cfg, ctx, &plan, &mut NoHooks)?);
        }
        Ok((experts, n_removed))
    }

    /// Experts plus one tuned merge per configured method. Cached per
    /// (seed, variant, method).
    pub fn sweep_cell(&self, seed: u64, sweep: &Sweep, variant: &Variant) -> Result<(CellResult, usize)> {
        let prefix = format!("{}/{}/seed{seed}", sweep.prefix(), variant.tag());
        let expert_key = format!("{prefix}/experts");
        let method_keys: Vec<String> = self
            .cfg
            .methods
            .iter()
            .map(|m| format!("{prefix}/{}", m.as_str()))
            .collect();
        let cached_experts: Option<(Vec<ExpertRow>, usize)> = self.store.get(&expert_key)?;
        let mut cached_merges = Vec::new();
        for k in &method_keys {
            cached_merges.push(self.store.get::<MergeRow>(k)?);
        }
        if let Some((experts, removed)) = &cached_experts {
            if cached_merges.iter().all(Option::is_some) {
                return Ok((
                    CellResult {
                        seed,
                        experts: experts.clone(),
                        merges: cached_merges.into_iter().map(Option::unwrap).collect(),
                    },
                    *removed,
                ));
            }
        }
        if self.store.read_only() {
            return Err(HarnessError::Config(format!("cell {prefix} is incomplete; run the sweep first")));
        }

        let ctx = self.context(seed)?;
        let bins = self.scores(seed)?.bins();
        let (experts, n_removed) = self.train_experts(&ctx, sweep, variant)?;
        if self.cfg.save_checkpoints {
            save_experts(self.out(), &ctx, sweep, variant, &experts)?;
        }
        let rows = experts
            .iter()
            .map(|e| {
                Ok(ExpertRow {
                    task: ctx.task_ids[e.task].clone(),
                    steps_run: e.steps_run,
                    stop_step: e.stop_step,
                    val_acc: crate::setup::own_accuracy(&ctx, e, Split::Val)?,
                    test_acc: crate::setup::own_accuracy(&ctx, e, Split::Test)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let expert_models = experts
            .iter()
            .map(|e| ctx.model(&e.checkpoint))
            .collect::<Result<Vec<_>>>()?;
        let tvs: Vec<TaskVector> = experts.iter().map(|e| e.task_vector.clone()).collect();
        let mut merges = Vec::with_capacity(method_keys.len());
        for (method, key) in self.cfg.methods.iter().zip(&method_keys) {
            let row = match self.store.get::<MergeRow>(key)? {
                Some(r) => r,
                None => {
                    let r = merge_row(&self.cfg, &ctx, &tvs, &expert_models, &bins, *method)?;
                    self.store.put(key, &r)?;
                    r
                }
            };
            merges.push(row);
        }
        self.store.put(&expert_key, &(rows.clone(), n_removed))?;
        Ok((
            CellResult {
                seed,
                experts: rows,
                merges,
            },
            n_removed,
        ))
    }

    fn sweep_grid(&self, sweep: &Sweep, variants: &[Variant]) -> Result<Vec<(u64, Variant, CellResult, usize)>> {
        let jobs: Vec<(u64, Variant)> = self
            .cfg
            .seeds
            .iter()
            .flat_map(|&s| variants.iter().map(move |v| (s, v.clone())))
            .collect();
        self.par_map(&jobs, |(seed, v)| {
            let (cell, removed) = self.sweep_cell(*seed, sweep, v)?;
            Ok((*seed, v.clone(), cell, removed))
        })
    }

    fn task_ids(&self) -> Vec<String> {
        self.cfg.tasks.iter().map(|t| t.task_id.clone()).collect()
    }

    /// Cells of the duration sweep in (seed, duration) order; writes
    /// `merge_report.csv` and `experts.csv`.
    pub fn run_duration_sweep(&self) -> Result<DurationSweep> {
        let sweep = self.main_sweep();
        let variants: Vec<Variant> = self.cfg.durations.iter().map(|&d| Variant::Fixed(d)).collect();
        let cells = self.sweep_grid(&sweep, &variants)?;
        let label = sweep.label();
        let entries: Vec<SweepEntry> = cells
            .iter()
            .map(|(seed, v, cell, _)| (&label, *seed, duration_of(v).to_string(), cell))
            .collect();
        report::write_merge_report(&self.out().join("merge_report.csv"), &self.task_ids(), &entries)?;
        report::write_experts(&self.out().join("experts.csv"), &entries)?;
        Ok(DurationSweep {
            cells: cells
                .into_iter()
                .map(|(seed, v, cell, _)| (seed, duration_of(&v), cell))
                .collect(),
        })
    }

    /// Duration sweep repeated for every distinct (rank, scale) pair;
    /// writes `rank_sweep.csv` and `rank_experts.csv`.
    pub fn run_rank_sweep(&self) -> Result<Vec<(RankScale, DurationSweep)>> {
        if self.cfg.mode != Mode::Lora {
            return Err(HarnessError::Config("the rank sweep needs mode = lora".into()));
        }
        let (pairs, dups) = self.cfg.dedup_pairs();
        for d in &dups {
            log::warn!("duplicate (rank, scale) pair ({}, {}) ignored", d.rank, d.scale);
        }
        let variants: Vec<Variant> = self.cfg.durations.iter().map(|&d| Variant::Fixed(d)).collect();
        let mut out = Vec::new();
        for pair in &pairs {
            let sweep = Sweep {
                mode: Mode::Lora,
                pair: *pair,
            };
            let cells = self.sweep_grid(&sweep, &variants)?;
            out.push((sweep, cells));
        }
        let labels: Vec<SweepLabel> = out.iter().map(|(s, _)| s.label()).collect();
        let entries: Vec<SweepEntry> = out
            .iter()
            .zip(&labels)
            .flat_map(|((_, cells), label)| {
                cells
                    .iter()
                    .map(move |(seed, v, cell, _)| (label, *seed, duration_of(v).to_string(), cell))
            })
            .collect();
        report::write_merge_report(&self.out().join("rank_sweep.csv"), &self.task_ids(), &entries)?;
        report::write_experts(&self.out().join("rank_experts.csv"), &entries)?;
        Ok(out
            .into_iter()
            .map(|(s, cells)| {
                (
                    s.pair,
                    DurationSweep {
                        cells: cells
                            .into_iter()
                            .map(|(seed, v, cell, _)| (seed, duration_of(&v), cell))
                            .collect(),
                    },
                )
            })
            .collect())
    }

    /// MoE-fies the LoRA experts of `variant` and post-trains routers and
    /// experts on the multi-task mixture.
    pub fn moe_cell(&self, seed: u64, variant: &Variant) -> Result<MoeRow> {
        let sweep = self.main_sweep();
        let m = &self.cfg.moe;
        let key = format!(
            "moe_k{}_s{}/{}/{}/seed{seed}",
            m.top_k,
            m.post_train_steps,
            sweep.prefix(),
            variant.tag()
        );
        self.store.cell(&key, || {
            let ctx = self.context(seed)?;
            let (experts, _) = self.train_experts(&ctx, &sweep, variant)?;
            let lms: Vec<_> = experts
                .iter()
                .map(|e| e.lora.clone().expect("lora experts"))
                .collect();
            post_train_moe(&self.cfg, &ctx, &lms, derive_seed(seed, &[MOE_INIT]))
        })
    }

    /// One MoE model per (seed, duration); writes `moe_sweep.csv`.
    pub fn run_moe_sweep(&self) -> Result<Vec<(u64, usize, MoeRow)>> {
        if self.cfg.mode != Mode::Lora {
            return Err(HarnessError::Config("the MoE sweep needs mode = lora".into()));
        }
        let jobs: Vec<(u64, usize)> = self
            .cfg
            .seeds
            .iter()
            .flat_map(|&s| self.cfg.durations.iter().map(move |&d| (s, d)))
            .collect();
        let rows = self.par_map(&jobs, |&(seed, d)| Ok((seed, d, self.moe_cell(seed, &Variant::Fixed(d))?)))?;
        let table: Vec<(String, &MoeRow)> = rows.iter().map(|(_, d, r)| (d.to_string(), r)).collect();
        report::write_moe(&self.out().join("moe_sweep.csv"), &table)?;
        Ok(rows)
    }

    fn loss_share_cell(&self, seed: u64) -> Result<Vec<LossShareRow>> {
        let sweep = self.main_sweep();
        let key = format!("loss_share/{}/seed{seed}", sweep.prefix());
        self.store.cell(&key, || {
            let ctx = self.context(seed)?;
            let scores = self.scores(seed)?;
            let bins = scores.bins();
            let longest = self.cfg.max_duration();
            let mut out = Vec::new();
            for t in 0..ctx.task_ids.len() {
                let plan = ExpertPlan::new(t, longest, sweep.mode, sweep.pair);
                let (mut model, mut tc) = prepare_run(&self.cfg, &ctx, &plan)?;
                tc.snapshot_steps = std::iter::once(0).chain(self.cfg.durations.iter().copied()).collect();
                let mut hook = LossShareHook {
                    data: &ctx.datasets[t].train,
                    bins: &bins,
                    n_bins: self.cfg.difficulty.n_bins,
                    task: ctx.task_ids[t].clone(),
                    rows: Vec::new(),
                };
                train(&mut model, &ctx.datasets[t].train, None, &tc, &mut hook)?;
                out.extend(hook.rows);
            }
            Ok(out)
        })
    }

    /// EL2N scores, loss shares, forgotten-example counts and the pruning
    /// sweep. Writes `scores.csv`, `loss_shares.csv`, `forgotten.csv` and
    /// `prune.csv`.
    pub fn run_difficulty_analysis(&self) -> Result<DifficultyAnalysis> {
        let seeds = self.cfg.seeds.clone();
        let scores = self.par_map(&seeds, |&s| self.scores(s))?;
        let per_seed: Vec<(u64, &[ScoreEntry])> = seeds
            .iter()
            .zip(&scores)
            .map(|(&s, c)| (s, c.entries.as_slice()))
            .collect();
        report::write_scores(&self.out().join("scores.csv"), &per_seed)?;

        let shares = self.par_map(&seeds, |&s| self.loss_share_cell(s))?;
        let n_bins = self.cfg.difficulty.n_bins;
        let share_rows: Vec<(u64, &[LossShareRow])> = seeds.iter().zip(&shares).map(|(&s, r)| (s, r.as_slice())).collect();
        report::write_loss_shares(&self.out().join("loss_shares.csv"), n_bins, &share_rows)?;

        let sweep = self.run_duration_sweep()?;
        let label = self.main_sweep().label();
        let entries: Vec<SweepEntry> = sweep
            .cells
            .iter()
            .map(|(seed, d, cell)| (&label, *seed, d.to_string(), cell))
            .collect();
        report::write_forgotten(&self.out().join("forgotten.csv"), n_bins, &entries)?;

        let durations = if self.cfg.difficulty.prune_durations.is_empty() {
            vec![self.cfg.max_duration()]
        } else {
            self.cfg.difficulty.prune_durations.clone()
        };
        let variants: Vec<Variant> = durations
            .iter()
            .flat_map(|&steps| {
                self.cfg
                    .difficulty
                    .prune_percentiles
                    .iter()
                    .map(move |&p| Variant::Pruned {
                        steps,
                        max_percentile: p,
                    })
            })
            .collect();
        let pruned = self.sweep_grid(&self.main_sweep(), &variants)?;
        let prune_entries: Vec<PruneEntry> = pruned
            .iter()
            .map(|(seed, v, cell, removed)| {
                let (duration, max_percentile) = match v {
                    Variant::Pruned { steps, max_percentile } => (*steps, *max_percentile),
                    _ => unreachable!("prune variants only"),
                };
                PruneEntry {
                    seed: *seed,
                    duration,
                    max_percentile,
                    n_removed: *removed,
                    cell,
                }
            })
            .collect();
        report::write_prune(&self.out().join("prune.csv"), &prune_entries)?;

        Ok(DifficultyAnalysis {
            scores: seeds.iter().copied().zip(scores.iter().map(|s| (**s).clone())).collect(),
            loss_shares: seeds.iter().copied().zip(shares).collect(),
            sweep,
            pruned: pruned
                .into_iter()
                .map(|(seed, v, cell, removed)| match v {
                    Variant::Pruned { steps, max_percentile } => (seed, steps, max_percentile, removed, cell),
                    _ => unreachable!("prune variants only"),
                })
                .collect(),
        })
    }

    /// Compares longest, best fixed and early-stopped experts for every
    /// method. Writes `early_stop.csv`, `early_stop_summary.csv`,
    /// `stop_steps.csv` and, in LoRA mode, `early_stop_moe.csv`.
    pub fn run_early_stop(&self) -> Result<EarlyStopReport> {
        let sweep = self.run_duration_sweep()?;
        let es_cells = self.sweep_grid(&self.main_sweep(), &[Variant::EarlyStop])?;
        let prefix = match self.cfg.mode {
            Mode::Fft => "FFT",
            Mode::Lora => "LoRA",
        };
        let longest = self.cfg.max_duration();
        let mut rows = Vec::new();
        for &method in &self.cfg.methods {
            let acc = |seed: u64, d: usize| -> f64 {
                sweep.cell(seed, d).and_then(|c| c.merge(method)).map(|m| m.test_acc).unwrap_or(f64::NAN)
            };
            let best = sweep.best_duration(method);
            rows.push(EarlyStopRow {
                method: method.to_string(),
                row: "longest".into(),
                label: format!("{prefix} {longest} steps"),
                duration: Some(longest),
                per_seed: self.cfg.seeds.iter().map(|&s| (s, acc(s, longest))).collect(),
            });
            rows.push(EarlyStopRow {
                method: method.to_string(),
                row: "best".into(),
                label: format!("{prefix} best"),
                duration: Some(best),
                per_seed: self.cfg.seeds.iter().map(|&s| (s, acc(s, best))).collect(),
            });
            rows.push(EarlyStopRow {
                method: method.to_string(),
                row: "early_stop".into(),
                label: format!("{prefix} early stop"),
                duration: None,
                per_seed: es_cells
                    .iter()
                    .map(|(s, _, c, _)| (*s, c.merge(method).map(|m| m.test_acc).unwrap_or(f64::NAN)))
                    .collect(),
            });
        }
        report::write_early_stop(
            &self.out().join("early_stop.csv"),
            &self.out().join("early_stop_summary.csv"),
            &rows,
        )?;
        let stops: Vec<(u64, &ExpertRow)> = es_cells
            .iter()
            .flat_map(|(s, _, c, _)| c.experts.iter().map(move |e| (*s, e)))
            .collect();
        report::write_stop_steps(&self.out().join("stop_steps.csv"), &stops)?;

        let mut moe_rows = Vec::new();
        if self.cfg.mode == Mode::Lora {
            let seeds = self.cfg.seeds.clone();
            let mut variants: Vec<(String, Variant)> = vec![("longest".into(), Variant::Fixed(longest))];
            variants.push(("early_stop".into(), Variant::EarlyStop));
            for (name, v) in variants {
                let per_seed = self.par_map(&seeds, |&s| self.moe_cell(s, &v))?;
                moe_rows.push(EarlyStopRow {
                    method: "moe".into(),
                    row: name.clone(),
                    label: match &v {
                        Variant::Fixed(d) => format!("{prefix} {d} steps"),
                        _ => format!("{prefix} early stop"),
                    },
                    duration: match v {
                        Variant::Fixed(d) => Some(d),
                        _ => None,
                    },
                    per_seed: per_seed.iter().map(|r| (r.seed, r.test_acc)).collect(),
                });
            }
            report::write_early_stop(
                &self.out().join("early_stop_moe.csv"),
                &self.out().join("early_stop_moe_summary.csv"),
                &moe_rows,
            )?;
        }
        Ok(EarlyStopReport {
            rows,
            moe_rows,
            early_stop: es_cells.into_iter().map(|(s, _, c, _)| (s, c)).collect(),
        })
    }
}

fn duration_of(v: &Variant) -> usize {
    match v {
        Variant::Fixed(d) => *d,
        Variant::Pruned { steps, .. } => *steps,
        Variant::EarlyStop => 0,
    }
}

/// Cells of one duration sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct DurationSweep {
    pub cells: Vec<(u64, usize, CellResult)>,
}

impl DurationSweep {
    pub fn cell(&self, seed: u64, duration: usize) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|(s, d, _)| *s == seed && *d == duration)
            .map(|(_, _, c)| c)
    }

    pub fn durations(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.cells.iter().map(|(_, d, _)| *d).collect();
        set.into_iter().collect()
    }

    /// Mean merged test accuracy over seeds, per duration.
    pub fn mean_merge_acc(&self, method: MergeMethod) -> BTreeMap<usize, f64> {
        let items: Vec<(usize, f64)> = self
            .cells
            .iter()
            .filter_map(|(_, d, c)| c.merge(method).map(|m| (*d, m.test_acc)))
            .collect();
        report::mean_by(&items)
    }

    /// Mean own-task expert test accuracy over seeds and tasks, per duration.
    pub fn mean_expert_acc(&self) -> BTreeMap<usize, f64> {
        let items: Vec<(usize, f64)> = self.cells.iter().map(|(_, d, c)| (*d, c.mean_expert_acc())).collect();
        report::mean_by(&items)
    }

    /// Duration with the highest mean merged test accuracy; the shortest
    /// wins ties.
    pub fn best_duration(&self, method: MergeMethod) -> usize {
        self.mean_merge_acc(method)
            .into_iter()
            .fold((0, f64::NEG_INFINITY), |best, (d, a)| if a > best.1 { (d, a) } else { best })
            .0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyAnalysis {
    pub scores: Vec<(u64, ScoresCell)>,
    pub loss_shares: Vec<(u64, Vec<LossShareRow>)>,
    pub sweep: DurationSweep,
    /// (seed, steps, max percentile, removed count, cell).
    pub pruned: Vec<(u64, usize, f64, usize, CellResult)>,
}

impl DifficultyAnalysis {
    /// Share of forgotten examples in the `k` hardest bins at `duration`,
    /// averaged over seeds and methods with any forgotten examples.
    pub fn top_bin_share(&self, duration: usize, k: usize) -> Option<f64> {
        let shares: Vec<f64> = self
            .sweep
            .cells
            .iter()
            .filter(|(_, d, _)| *d == duration)
            .flat_map(|(_, _, c)| c.merges.iter().filter_map(|m| m.forgotten.top_share(k)))
            .collect();
        (!shares.is_empty()).then(|| shares.iter().sum::<f64>() / shares.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopReport {
    pub rows: Vec<EarlyStopRow>,
    pub moe_rows: Vec<EarlyStopRow>,
    pub early_stop: Vec<(u64, CellResult)>,
}

impl EarlyStopReport {
    pub fn row(&self, method: MergeMethod, row: &str) -> Option<&EarlyStopRow> {
        self.rows.iter().find(|r| r.method == method.as_str() && r.row == row)
    }
}

fn merge_row(
    cfg: &ExperimentConfig,
    ctx: &SeedContext,
    tvs: &[TaskVector],
    experts: &[MlpModel],
    bins: &BTreeMap<ExampleId, usize>,
    method: MergeMethod,
) -> Result<MergeRow> {
    let grid = cfg.grid(method, ctx.seed);
    let (best, val_acc) = tune(&ctx.base, tvs, &grid, |m| ctx.mean_accuracy(m, Split::Val))?;
    let merged = merge(&ctx.base, tvs, &best)?;
    let per_task_test = ctx.accuracies(&merged, Split::Test)?;
    let merged_model = ctx.model(&merged)?;
    let mut pairs = Vec::new();
    for (t, ds) in ctx.datasets.iter().enumerate() {
        let ex = experts[t].predict(&ds.train)?;
        let mg = merged_model.predict(&ds.train)?;
        for i in 0..ds.train.len() {
            pairs.push(PredictionPair {
                example_id: ds.train.ids[i],
                label: ds.train.labels[i],
                expert_pred: ex[i],
                merged_pred: mg[i],
            });
        }
    }
    let forgotten = forgotten_examples(&pairs, bins);
    let mut by_bin = vec![0; cfg.difficulty.n_bins + 1];
    for (&b, &c) in &forgotten.by_bin {
        by_bin[b] += c;
    }
    Ok(MergeRow {
        method,
        config: best,
        val_acc,
        test_acc: per_task_test.iter().sum::<f64>() / per_task_test.len() as f64,
        per_task_test,
        forgotten: ForgottenCounts {
            by_bin,
            total: forgotten.examples.len(),
        },
    })
}

/// Mean test accuracy of an in-memory model over every task.
pub fn model_accuracies(ctx: &SeedContext, model: &MlpModel, split: Split) -> Result<Vec<f64>> {
    ctx.datasets
        .iter()
        .map(|d| Ok(model.accuracy(d.split(split))?))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Union of every task's train split, task indices attached.
pub fn pooled_train(ctx: &SeedContext) -> Result<Examples> {
    let parts: Vec<&Examples> = ctx.datasets.iter().map(|d| &d.train).collect();
    Ok(Examples::concat(&parts)?)
}

/// MoE-fies `lms` over the context's base and post-trains router and
/// experts with the base frozen.
pub fn post_train_moe(
    cfg: &ExperimentConfig,
    ctx: &SeedContext,
    lms: &[upcycle_core::LoraModel],
    seed: u64,
) -> Result<MoeRow> {
    let moe = moefy(&ctx.base, lms, cfg.moe.top_k, seed)?;
    Ok(post_train_moe_model(cfg, ctx, &moe, seed)?.0)
}

/// Post-trains an existing MoE model on the pooled train splits of `ctx`.
pub fn post_train_moe_model(
    cfg: &ExperimentConfig,
    ctx: &SeedContext,
    moe: &MoeModel,
    seed: u64,
) -> Result<(MoeRow, MoeModel)> {
    let mut model = ctx.model(&moe.base)?;
    model.attach_moe(moe)?;
    let acc_before = mean(&model_accuracies(ctx, &model, Split::Test)?);
    if cfg.moe.post_train_steps > 0 {
        let tc = TrainConfig {
            steps: cfg.moe.post_train_steps,
            batch_size: cfg.moe.batch_size,
            peak_lr: cfg.moe.peak_lr,
            weight_decay: 0.0,
            seed: derive_seed(seed, &[MOE_TRAIN]),
            schedule: Schedule::WarmupCosine,
            warmup: Warmup::Fraction(0.1),
            param_set: ParamSet::Moe,
            early_stop: None,
            snapshot_steps: Vec::new(),
        };
        train(&mut model, &pooled_train(ctx)?, None, &tc, &mut NoHooks)?;
    }
    let after = model.to_checkpoint()?;
    let base_frozen = moe
        .base
        .params
        .iter()
        .all(|(k, v)| after.params.get(k).is_some_and(|a| a.data() == v.data()));
    let per_task_test = model_accuracies(ctx, &model, Split::Test)?;
    let trained = model.to_moe_model(&moe.base, &moe.init)?;
    Ok((
        MoeRow {
            seed: ctx.seed,
            top_k: moe.top_k,
            init: moe.init.clone(),
            post_train_steps: cfg.moe.post_train_steps,
            acc_before,
            test_acc: mean(&per_task_test),
            per_task_test,
            base_frozen,
        },
        trained,
    ))
}

fn save_experts(out: &Path, ctx: &SeedContext, sweep: &Sweep, variant: &Variant, experts: &[Expert]) -> Result<()> {
    let dir = out.join("checkpoints").join(sweep.prefix());
    std::fs::create_dir_all(&dir)?;
    for e in experts {
        let steps = match variant {
            Variant::Fixed(d) => d.to_string(),
            other => other.tag(),
        };
        let stem = format!("{}_s{steps}_seed{}", ctx.task_ids[e.task], ctx.seed);
        save(&e.checkpoint, dir.join(format!("{stem}.upck")))?;
        if let Some(lm) = &e.lora {
            upcycle_core::store::save_archive(&lm.to_archive(&ctx.task_ids[e.task]), dir.join(format!("{stem}.lora.upck")))?;
        }
    }
    Ok(())
}

/// Stops training once `n` updates have run.
pub struct StopAt(pub usize);

impl TrainHooks for StopAt {
    fn on_step(&mut self, record: &StepRecord, _model: &MlpModel) -> upcycle_train::Result<Control> {
        Ok(if record.step >= self.0 { Control::Stop } else { Control::Continue })
    }
}

struct LossShareHook<'a> {
    data: &'a Examples,
    bins: &'a BTreeMap<ExampleId, usize>,
    n_bins: usize,
    task: String,
    rows: Vec<LossShareRow>,
}

impl TrainHooks for LossShareHook<'_> {
    fn on_snapshot(&mut self, step: usize, model: &MlpModel) -> upcycle_train::Result<()> {
        let (_, per_example) = model.forward_loss(self.data)?;
        let losses: Vec<(ExampleId, f64)> = self.data.ids.iter().copied().zip(per_example).collect();
        let share = loss_share_by_bin(step, &losses, self.bins, self.n_bins)?;
        self.rows.push(LossShareRow {
            task: self.task.clone(),
            step,
            shares: share.shares,
            uniform_fallback: share.uniform_fallback,
        });
        Ok(())
    }
}

/// Number of examples the pruning sweep removes from an `n`-example split.
pub fn pruned_count(n: usize, max_percentile: f64) -> usize {
    prune_count(n, 100.0 - max_percentile)
}
