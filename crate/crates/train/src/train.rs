//! Deterministic minibatch training loop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use upcycle_core::rng::derive_seed;

use crate::error::{Result, TrainError};
use crate::model::{MlpModel, ParamSet};
use crate::optim::{adamw_step, lr_warmup_cosine, lr_warmup_plateau, AdamState, EarlyStopConfig, EarlyStopState};
use crate::synthetic::Examples;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    WarmupCosine,
    WarmupPlateau,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Warmup {
    Steps(usize),
    Fraction(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub schedule: Schedule,
    pub warmup: Warmup,
    pub param_set: ParamSet,
    #[serde(default)]
    pub early_stop: Option<EarlyStopConfig>,
    /// Completed-step counts at which `on_snapshot` fires.
    #[serde(default)]
    pub snapshot_steps: Vec<usize>,
}

impl TrainConfig {
    pub fn warmup_steps(&self) -> usize {
        match self.warmup {
            Warmup::Steps(n) => n,
            Warmup::Fraction(f) => (f * self.steps as f64).round() as usize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::argument("batch_size must be positive"));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(TrainError::argument("peak_lr must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(TrainError::argument("weight_decay must be nonnegative"));
        }
        if let Warmup::Fraction(f) = self.warmup {
            if !(0.0..1.0).contains(&f) {
                return Err(TrainError::argument("warmup fraction must lie in [0, 1)"));
            }
        }
        if self.schedule == Schedule::WarmupCosine && self.steps > 0 && self.warmup_steps() >= self.steps {
            return Err(TrainError::argument("warmup must be shorter than training"));
        }
        if let Some(es) = &self.early_stop {
            es.validate()?;
        }
        Ok(())
    }

    /// Rate for update `s` (0-based) before any early-stop multiplier.
    pub fn lr_at(&self, s: usize) -> f64 {
        let w = self.warmup_steps();
        match self.schedule {
            Schedule::WarmupCosine => lr_warmup_cosine(s + 1, self.steps + 1, w, self.peak_lr),
            Schedule::WarmupPlateau => lr_warmup_plateau(s + 1, w, self.peak_lr),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Number of completed updates.
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainOutcome {
    pub history: Vec<StepRecord>,
    pub steps_run: usize,
    /// Set when the early-stop controller ended training.
    pub stop_step: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

pub trait TrainHooks {
    fn on_step(&mut self, _record: &StepRecord, _model: &MlpModel) -> Result<Control> {
        Ok(Control::Continue)
    }

    fn on_snapshot(&mut self, _step: usize, _model: &MlpModel) -> Result<()> {
        Ok(())
    }
}

pub struct NoHooks;

impl TrainHooks for NoHooks {}

/// Epoch-wise shuffled minibatches; a batch may straddle two epochs.
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = BatchSampler {
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xBA7C4])),
            order: (0..n).collect(),
            pos: n,
        };
        s.pos = s.order.len();
        s
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Trains `model` in place on `data`. `val` is required when early stopping
/// is configured.
pub fn train(
    model: &mut MlpModel,
    data: &Examples,
    val: Option<&Examples>,
    config: &TrainConfig,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.steps > 0 && data.is_empty() {
        return Err(TrainError::argument("no training examples"));
    }
    let mut controller = match (&config.early_stop, val) {
        (Some(es), Some(_)) => Some((es, EarlyStopState::new(es))),
        (Some(_), None) => return Err(TrainError::argument("early stopping needs a validation split")),
        (None, _) => None,
    };
    let mut outcome = TrainOutcome::default();
    if config.snapshot_steps.contains(&0) {
        hooks.on_snapshot(0, model)?;
    }
    let mut sampler = BatchSampler::new(data.len(), config.seed);
    let mut adam = AdamState::default();
    let batch_size = config.batch_size.min(data.len().max(1));

    for s in 0..config.steps {
        let rows = sampler.next_batch(batch_size);
        let batch = data.subset(&rows);
        let (loss, _, grads) = model.loss_and_grad(&batch, config.param_set)?;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step: s, loss });
        }
        let multiplier = controller.as_ref().map_or(1.0, |(_, st)| st.multiplier());
        let lr = config.lr_at(s) * multiplier;
        {
            let mut params = model.params_mut(config.param_set);
            adamw_step(&mut params, &grads, &mut adam, lr, config.weight_decay)?;
        }
        let step = s + 1;
        let mut record = StepRecord {
            step,
            lr,
            train_loss: loss,
            val_acc: None,
        };
        let mut stop = false;
        if let (Some((es, st)), Some(v)) = (controller.as_mut(), val) {
            if step >= es.warmup_steps && (step - es.warmup_steps) % es.eval_every == 0 {
                let acc = model.accuracy(v)?;
                record.val_acc = Some(acc);
                stop = st.update(acc).stop;
            }
        }
        if config.snapshot_steps.contains(&step) {
            hooks.on_snapshot(step, model)?;
        }
        let control = hooks.on_step(&record, model)?;
        outcome.history.push(record);
        outcome.steps_run = step;
        if stop {
            outcome.stop_step = Some(step);
            break;
        }
        if control == Control::Stop {
            break;
        }
    }
    Ok(outcome)
}

/// Per-step metrics as CSV: step, lr, train_loss, val_acc.
pub fn write_metrics(history: &[StepRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "lr", "train_loss", "val_acc"])?;
    for r in history {
        w.write_record([
            r.step.to_string(),
            format!("{:?}", r.lr),
            format!("{:?}", r.train_loss),
            r.val_acc.map(|v| format!("{v:?}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
