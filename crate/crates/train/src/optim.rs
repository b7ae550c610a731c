//! AdamW, learning-rate schedules and the plateau early-stopping
//! controller.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};
use crate::model::Gradients;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One AdamW update with decoupled weight decay:
/// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)`.
pub fn adamw_step(
    params: &mut [(String, &mut [f64])],
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name.as_str())
            .ok_or_else(|| TrainError::argument(format!("no gradient for {name}")))?;
        if g.len() != p.len() {
            return Err(TrainError::argument(format!(
                "gradient for {name} has {} entries, parameter has {}",
                g.len(),
                p.len()
            )));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for i in 0..g.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
            p[i] -= lr * (update + weight_decay * p[i]);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `peak` over `warmup_steps`, then cosine decay
/// to 0 at `total_steps`.
pub fn lr_warmup_cosine(step: usize, total_steps: usize, warmup_steps: usize, peak: f64) -> f64 {
    if step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return peak;
    }
    let progress = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    peak * 0.5 * (1.0 + (PI * progress).cos())
}

/// Linear warmup, then constant `peak`.
pub fn lr_warmup_plateau(step: usize, warmup_steps: usize, peak: f64) -> f64 {
    if step < warmup_steps {
        peak * step as f64 / warmup_steps as f64
    } else {
        peak
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopConfig {
    pub warmup_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub factor: f64,
    pub max_reductions: usize,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        EarlyStopConfig {
            warmup_steps: 50,
            eval_every: 5,
            patience: 3,
            factor: 0.5,
            max_reductions: 4,
        }
    }
}

impl EarlyStopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_every == 0 || self.patience == 0 || self.max_reductions == 0 {
            return Err(TrainError::argument("eval_every, patience and max_reductions must be positive"));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(TrainError::argument("early-stop factor must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub eval_every: usize,
    pub patience: usize,
    pub factor: f64,
    pub max_reductions: usize,
    pub best_val: f64,
    pub stagnant_rounds: usize,
    pub reductions_done: usize,
    pub stopped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopDecision {
    pub multiplier: f64,
    pub reduced: bool,
    pub stop: bool,
}

impl EarlyStopState {
    pub fn new(cfg: &EarlyStopConfig) -> Self {
        EarlyStopState {
            eval_every: cfg.eval_every,
            patience: cfg.patience,
            factor: cfg.factor,
            max_reductions: cfg.max_reductions,
            best_val: f64::NEG_INFINITY,
            stagnant_rounds: 0,
            reductions_done: 0,
            stopped: false,
        }
    }

    pub fn multiplier(&self) -> f64 {
        self.factor.powi(self.reductions_done as i32)
    }

    /// Records one validation round. A strictly better accuracy resets the
    /// stagnation count; `patience` stagnant rounds in a row cut the rate
    /// by `factor`; the `max_reductions`-th cut stops training.
    pub fn update(&mut self, val_acc: f64) -> EarlyStopDecision {
        let mut reduced = false;
        if !self.stopped {
            if val_acc > self.best_val {
                self.best_val = val_acc;
                self.stagnant_rounds = 0;
            } else {
                self.stagnant_rounds += 1;
                if self.stagnant_rounds >= self.patience {
                    self.stagnant_rounds = 0;
                    self.reductions_done += 1;
                    reduced = true;
                    if self.reductions_done >= self.max_reductions {
                        self.stopped = true;
                    }
                }
            }
        }
        EarlyStopDecision {
            multiplier: self.multiplier(),
            reduced,
            stop: self.stopped,
        }
    }
}

/// Functional form of [`EarlyStopState::update`].
pub fn early_stop_update(mut state: EarlyStopState, val_acc: f64) -> (EarlyStopState, f64, bool) {
    let d = state.update(val_acc);
    (state, d.multiplier, d.stop)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_zero_grad_cases() {
        let mut w = vec![2.0, -1.0];
        let g: Gradients = [("w".to_string(), vec![0.0, 0.0])].into();
        let mut st = AdamState::default();
        {
            let mut ps = vec![("w".to_string(), w.as_mut_slice())];
            adamw_step(&mut ps, &g, &mut st, 0.1, 0.0).unwrap();
        }
        assert_eq!(w, vec![2.0, -1.0]);
        {
            let mut ps = vec![("w".to_string(), w.as_mut_slice())];
            adamw_step(&mut ps, &g, &mut st, 0.1, 0.5).unwrap();
        }
        assert_eq!(w, vec![2.0 * (1.0 - 0.05), -1.0 * (1.0 - 0.05)]);
    }

    #[test]
    fn schedule_points() {
        assert_eq!(lr_warmup_cosine(10, 100, 10, 0.3), 0.3);
        assert!(lr_warmup_cosine(100, 100, 10, 0.3).abs() < 1e-12);
        assert!((lr_warmup_cosine(55, 100, 10, 0.3) - 0.15).abs() < 1e-12);
        assert_eq!(lr_warmup_cosine(5, 100, 10, 0.3), 0.15);
        assert_eq!(lr_warmup_plateau(60, 50, 0.2), 0.2);
    }

    #[test]
    fn controller_increasing_never_stops() {
        let mut s = EarlyStopState::new(&EarlyStopConfig::default());
        for i in 0..100 {
            let d = s.update(i as f64);
            assert_eq!(d.multiplier, 1.0);
            assert!(!d.stop);
        }
    }
}
