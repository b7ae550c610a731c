//! Per-seed benchmark setup, pretraining, expert fine-tuning and
//! evaluation helpers shared by all pipelines.

use upcycle_core::lora::{apply, lora_init, lora_task_vector, matrix_layers, RankScale};
use upcycle_core::merging::compute_task_vector;
use upcycle_core::rng::derive_seed;
use upcycle_core::{Checkpoint, LoraModel, TaskVector};
use upcycle_train::model::ParamSet;
use upcycle_train::synthetic::{generate, Dataset, Examples};
use upcycle_train::train::{StepRecord, TrainHooks};
use upcycle_train::{train, MlpModel, NoHooks, Schedule, TaskSpec, TrainConfig, Warmup};

use crate::config::{ExperimentConfig, Mode};
use crate::error::Result;

// seed-derivation labels
const DATA: u64 = 0xDA7A;
const INIT: u64 = 0x1417;
const PRETRAIN: u64 = 0x9E7;
const ORDER: u64 = 0x0DE5;
const LORA_INIT: u64 = 0x10EA;
pub(crate) const PROBE: u64 = 0x9B0E;

/// Everything derived from one experiment seed before fine-tuning.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub seed: u64,
    pub datasets: Vec<Dataset>,
    pub base: Checkpoint,
    pub task_ids: Vec<String>,
}

/// Task specs with data seeds re-derived from the experiment seed.
pub fn task_specs_for_seed(cfg: &ExperimentConfig, seed: u64) -> Vec<TaskSpec> {
    cfg.tasks
        .iter()
        .map(|t| TaskSpec {
            seed: derive_seed(t.seed, &[DATA, seed]),
            prototype_seed: derive_seed(t.prototype_seed, &[DATA, seed]),
            ..t.clone()
        })
        .collect()
}

pub fn generate_datasets(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Dataset>> {
    task_specs_for_seed(cfg, seed)
        .iter()
        .enumerate()
        .map(|(i, s)| Ok(generate(s)?.set_task_index(i)))
        .collect()
}

/// Pretrains backbone and heads on the pooled clean train data of every
/// task.
pub fn pretrain(cfg: &ExperimentConfig, datasets: &[Dataset], seed: u64) -> Result<Checkpoint> {
    let heads: Vec<(String, usize)> = datasets
        .iter()
        .map(|d| (d.spec.task_id.clone(), d.spec.n_classes))
        .collect();
    let mut model = MlpModel::init(datasets[0].spec.input_dim, &cfg.hidden, &heads, derive_seed(seed, &[INIT]))?;
    let clean: Vec<Examples> = datasets.iter().map(|d| d.train.clean()).collect();
    let pool = Examples::concat(&clean.iter().collect::<Vec<_>>())?;
    let tc = TrainConfig {
        steps: cfg.pretrain.steps,
        batch_size: cfg.pretrain.batch_size,
        peak_lr: cfg.pretrain.peak_lr,
        weight_decay: cfg.pretrain.weight_decay,
        seed: derive_seed(seed, &[PRETRAIN]),
        schedule: Schedule::WarmupCosine,
        warmup: Warmup::Fraction(0.1),
        param_set: ParamSet::Full,
        early_stop: None,
        snapshot_steps: Vec::new(),
    };
    train(&mut model, &pool, None, &tc, &mut NoHooks)?;
    let mut base = model.to_checkpoint()?;
    base.set_meta("model_id", "base");
    Ok(base)
}

pub fn build_context(cfg: &ExperimentConfig, seed: u64) -> Result<SeedContext> {
    let datasets = generate_datasets(cfg, seed)?;
    let base = pretrain(cfg, &datasets, seed)?;
    Ok(SeedContext {
        seed,
        task_ids: datasets.iter().map(|d| d.spec.task_id.clone()).collect(),
        datasets,
        base,
    })
}

impl SeedContext {
    pub fn model(&self, ckpt: &Checkpoint) -> Result<MlpModel> {
        Ok(MlpModel::from_checkpoint(ckpt, &self.task_ids)?)
    }

    /// Per-task accuracy of `ckpt` on `split` of every task.
    pub fn accuracies(&self, ckpt: &Checkpoint, split: upcycle_train::synthetic::Split) -> Result<Vec<f64>> {
        let m = self.model(ckpt)?;
        self.datasets
            .iter()
            .map(|d| Ok(m.accuracy(d.split(split))?))
            .collect()
    }

    pub fn mean_accuracy(&self, ckpt: &Checkpoint, split: upcycle_train::synthetic::Split) -> Result<f64> {
        let a = self.accuracies(ckpt, split)?;
        Ok(a.iter().sum::<f64>() / a.len() as f64)
    }
}

/// How one expert is fine-tuned.
#[derive(Debug, Clone)]
pub struct ExpertPlan {
    pub task: usize,
    pub steps: usize,
    pub mode: Mode,
    pub pair: RankScale,
    pub early_stop: bool,
    /// Replaces the task's train split (pruning sweeps).
    pub train_override: Option<Examples>,
    /// Seed for data order (and LoRA init); defaults to the task's seed.
    pub run_seed: Option<u64>,
}

impl ExpertPlan {
    pub fn new(task: usize, steps: usize, mode: Mode, pair: RankScale) -> Self {
        ExpertPlan {
            task,
            steps,
            mode,
            pair,
            early_stop: false,
            train_override: None,
            run_seed: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Expert {
    pub task: usize,
    pub checkpoint: Checkpoint,
    pub task_vector: TaskVector,
    pub lora: Option<LoraModel>,
    pub steps_run: usize,
    pub stop_step: Option<usize>,
    pub history: Vec<StepRecord>,
}

/// Model prepared for fine-tuning plus its training config.
pub fn prepare_run(cfg: &ExperimentConfig, ctx: &SeedContext, plan: &ExpertPlan) -> Result<(MlpModel, TrainConfig)> {
    let run_seed = plan
        .run_seed
        .unwrap_or_else(|| derive_seed(ctx.seed, &[ORDER, plan.task as u64]));
    let mut model = ctx.model(&ctx.base)?;
    let (param_set, peak) = match plan.mode {
        Mode::Fft => (ParamSet::Backbone, cfg.finetune.peak_lr_fft),
        Mode::Lora => {
            let layers: Vec<_> = matrix_layers(&ctx.base)
                .into_iter()
                .filter(|(n, _, _)| n.starts_with("layer"))
                .collect();
            let lm = lora_init(
                &layers,
                plan.pair.rank,
                plan.pair.scale,
                derive_seed(run_seed, &[LORA_INIT]),
                "base",
            )?;
            model.attach_lora(&lm)?;
            (ParamSet::Lora, cfg.finetune.peak_lr_lora)
        }
    };
    let es = &cfg.early_stop.controller;
    let tc = if plan.early_stop {
        TrainConfig {
            steps: plan.steps,
            batch_size: cfg.finetune.batch_size,
            peak_lr: peak,
            weight_decay: cfg.finetune.weight_decay,
            seed: run_seed,
            schedule: Schedule::WarmupPlateau,
            warmup: Warmup::Steps(es.warmup_steps),
            param_set,
            early_stop: Some(*es),
            snapshot_steps: Vec::new(),
        }
    } else {
        TrainConfig {
            steps: plan.steps,
            batch_size: cfg.finetune.batch_size,
            peak_lr: peak,
            weight_decay: cfg.finetune.weight_decay,
            seed: run_seed,
            schedule: Schedule::WarmupCosine,
            warmup: Warmup::Fraction(cfg.finetune.warmup_frac),
            param_set,
            early_stop: None,
            snapshot_steps: Vec::new(),
        }
    };
    Ok((model, tc))
}

/// Converts a fine-tuned model into an exported expert checkpoint and its
/// task vector.
pub fn export_expert(ctx: &SeedContext, model: &MlpModel, task: usize, mode: Mode) -> Result<(Checkpoint, TaskVector, Option<LoraModel>)> {
    let task_id = &ctx.task_ids[task];
    match mode {
        Mode::Fft => {
            let mut ckpt = model.to_checkpoint()?;
            ckpt.set_meta("task", task_id.clone());
            let tv = compute_task_vector(&ckpt, &ctx.base)?;
            Ok((ckpt, tv, None))
        }
        Mode::Lora => {
            let lm = model.to_lora_model("base")?;
            let mut ckpt = apply(&ctx.base, &lm)?;
            ckpt.set_meta("task", task_id.clone());
            let tv = lora_task_vector(&lm, &ctx.base, task_id)?;
            Ok((ckpt, tv, Some(lm)))
        }
    }
}

pub fn train_expert(
    cfg: &ExperimentConfig,
    ctx: &SeedContext,
    plan: &ExpertPlan,
    hooks: &mut dyn TrainHooks,
) -> Result<Expert> {
    let (mut model, tc) = prepare_run(cfg, ctx, plan)?;
    let ds = &ctx.datasets[plan.task];
    let data = plan.train_override.as_ref().unwrap_or(&ds.train);
    let val = plan.early_stop.then_some(&ds.val);
    let outcome = train(&mut model, data, val, &tc, hooks)?;
    let (checkpoint, task_vector, lora) = export_expert(ctx, &model, plan.task, plan.mode)?;
    Ok(Expert {
        task: plan.task,
        checkpoint,
        task_vector,
        lora,
        steps_run: outcome.steps_run,
        stop_step: outcome.stop_step,
        history: outcome.history,
    })
}

/// Accuracy of an expert on its own task's split.
pub fn own_accuracy(ctx: &SeedContext, expert: &Expert, split: upcycle_train::synthetic::Split) -> Result<f64> {
    let m = ctx.model(&expert.checkpoint)?;
    Ok(m.accuracy(ctx.datasets[expert.task].split(split))?)
}
