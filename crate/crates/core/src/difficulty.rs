//! EL2N difficulty scores, quantile binning, loss shares, forgotten
//! examples and hardest-example pruning.
//!
//! These functions work on per-example predictions rather than on models,
//! so any classifier that produces class probabilities can be analyzed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_N_BINS: usize = 10;
pub const DEFAULT_PROBE_STEP: usize = 32;
pub const DEFAULT_N_SEEDS: usize = 10;

/// Example ids are unique across a dataset.
pub type ExampleId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyScores {
    pub scores: BTreeMap<ExampleId, f64>,
    pub probe_step: usize,
    pub n_seeds: usize,
}

/// Loss fractions per bin at one logged step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossShare {
    pub step: usize,
    pub shares: Vec<f64>,
    /// Set when the total loss was zero and shares defaulted to uniform.
    pub uniform_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DifficultyReport {
    pub bins: BTreeMap<ExampleId, usize>,
    pub per_bin_loss_share: Vec<LossShare>,
    pub forgotten_by_bin: BTreeMap<usize, usize>,
}

/// `‖p − onehot(label)‖₂`.
pub fn el2n(probs: &[f64], label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(Error::argument(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    let sq: f64 = probs
        .iter()
        .enumerate()
        .map(|(c, &p)| {
            let d = p - if c == label { 1.0 } else { 0.0 };
            d * d
        })
        .sum();
    Ok(sq.sqrt())
}

/// Mean EL2N over probe models, one per seed. `probe(seed)` returns class
/// probabilities for every entry of `examples`, in order.
pub fn score_dataset<F, E>(
    mut probe: F,
    examples: &[(ExampleId, usize)],
    seeds: &[u64],
    probe_step: usize,
) -> Result<DifficultyScores>
where
    F: FnMut(u64) -> std::result::Result<Vec<Vec<f64>>, E>,
    E: Display,
{
    if seeds.is_empty() {
        return Err(Error::argument("score_dataset needs at least one seed"));
    }
    let mut sums = vec![0.0f64; examples.len()];
    for &seed in seeds {
        let probs = probe(seed).map_err(|e| Error::Callback {
            context: format!("probe seed {seed}"),
            message: e.to_string(),
        })?;
        if probs.len() != examples.len() {
            return Err(Error::argument(format!(
                "probe returned {} rows for {} examples",
                probs.len(),
                examples.len()
            )));
        }
        for (s, (p, &(_, label))) in sums.iter_mut().zip(probs.iter().zip(examples)) {
            *s += el2n(p, label)?;
        }
    }
    let n = seeds.len() as f64;
    let scores = examples
        .iter()
        .zip(sums)
        .map(|(&(id, _), s)| (id, s / n))
        .collect();
    Ok(DifficultyScores {
        scores,
        probe_step,
        n_seeds: seeds.len(),
    })
}

/// Ascending-score quantile bins numbered `1..=n_bins`. Ties are ordered by
/// example id; the lowest bins take the remainder.
pub fn bin_examples(scores: &DifficultyScores, n_bins: usize) -> Result<BTreeMap<ExampleId, usize>> {
    if n_bins == 0 {
        return Err(Error::argument("n_bins must be at least 1"));
    }
    if scores.scores.is_empty() {
        return Err(Error::argument("cannot bin an empty score set"));
    }
    let mut order: Vec<(ExampleId, f64)> = scores.scores.iter().map(|(&k, &v)| (k, v)).collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let n = order.len();
    let (base, extra) = (n / n_bins, n % n_bins);
    let mut out = BTreeMap::new();
    let mut it = order.into_iter();
    for bin in 0..n_bins {
        let size = base + usize::from(bin < extra);
        for (id, _) in it.by_ref().take(size) {
            out.insert(id, bin + 1);
        }
    }
    Ok(out)
}

/// Per-bin loss fractions `Σ_{i∈b} loss_i / Σ_i loss_i`. Examples absent
/// from `bins` are an error.
pub fn loss_share_by_bin(
    step: usize,
    losses: &[(ExampleId, f64)],
    bins: &BTreeMap<ExampleId, usize>,
    n_bins: usize,
) -> Result<LossShare> {
    if n_bins == 0 {
        return Err(Error::argument("n_bins must be at least 1"));
    }
    let mut per_bin = vec![0.0f64; n_bins];
    for &(id, loss) in losses {
        let bin = *bins
            .get(&id)
            .ok_or_else(|| Error::argument(format!("example {id} has no bin")))?;
        if !(1..=n_bins).contains(&bin) {
            return Err(Error::argument(format!("bin {bin} outside 1..={n_bins}")));
        }
        per_bin[bin - 1] += loss;
    }
    let total: f64 = per_bin.iter().sum();
    if total > 0.0 {
        Ok(LossShare {
            step,
            shares: per_bin.iter().map(|l| l / total).collect(),
            uniform_fallback: false,
        })
    } else {
        Ok(LossShare {
            step,
            shares: vec![1.0 / n_bins as f64; n_bins],
            uniform_fallback: true,
        })
    }
}

/// One example's outcome under its task expert and under the merged model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionPair {
    pub example_id: ExampleId,
    pub label: usize,
    pub expert_pred: usize,
    pub merged_pred: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Forgotten {
    pub examples: BTreeSet<ExampleId>,
    pub by_bin: BTreeMap<usize, usize>,
}

/// Examples the expert classifies correctly and the merged model does not,
/// with counts per difficulty bin. Examples without a bin are counted under
/// bin 0.
pub fn forgotten_examples(pairs: &[PredictionPair], bins: &BTreeMap<ExampleId, usize>) -> Forgotten {
    let mut out = Forgotten::default();
    for p in pairs {
        if p.expert_pred == p.label && p.merged_pred != p.label {
            out.examples.insert(p.example_id);
            *out.by_bin.entry(bins.get(&p.example_id).copied().unwrap_or(0)).or_insert(0) += 1;
        }
    }
    out
}

/// Number of examples removed at `pct` percent of `n`.
pub fn prune_count(n: usize, pct: f64) -> usize {
    let raw = pct * n as f64 / 100.0;
    // guard against 10% of 10 landing a hair above 1.0
    ((raw - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Splits `ids` into (kept, removed): the `⌈pct%·n⌉` highest scores are
/// removed, equal scores removing the higher id first. Both lists keep the
/// input order.
pub fn prune_hardest(
    ids: &[ExampleId],
    scores: &DifficultyScores,
    pct: f64,
) -> Result<(Vec<ExampleId>, Vec<ExampleId>)> {
    if !(0.0..100.0).contains(&pct) {
        return Err(Error::argument(format!("prune percentage {pct} outside [0, 100)")));
    }
    let mut ranked = Vec::with_capacity(ids.len());
    for &id in ids {
        let s = *scores
            .scores
            .get(&id)
            .ok_or_else(|| Error::argument(format!("example {id} has no score")))?;
        ranked.push((id, s));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(b.0.cmp(&a.0)));
    let removed: BTreeSet<ExampleId> = ranked
        .iter()
        .take(prune_count(ids.len(), pct))
        .map(|&(id, _)| id)
        .collect();
    let (r, k): (Vec<ExampleId>, Vec<ExampleId>) = ids.iter().partition(|id| removed.contains(id));
    Ok((k, r))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(v: &[(u64, f64)]) -> DifficultyScores {
        DifficultyScores {
            scores: v.iter().copied().collect(),
            probe_step: 32,
            n_seeds: 1,
        }
    }

    #[test]
    fn el2n_examples() {
        assert_eq!(el2n(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        assert!((el2n(&[1.0, 0.0], 1).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert!((el2n(&[0.5, 0.5], 0).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(el2n(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn score_dataset_mean_of_constant_models() {
        let ex = [(10, 0), (11, 1)];
        let s = score_dataset(
            |seed| -> std::result::Result<_, String> {
                let p = if seed == 0 { vec![0.5, 0.5] } else { vec![1.0, 0.0] };
                Ok(vec![p.clone(), p])
            },
            &ex,
            &[0, 1],
            32,
        )
        .unwrap();
        let half = 0.5f64.sqrt();
        assert!((s.scores[&10] - (half + 0.0) / 2.0).abs() < 1e-12);
        assert!((s.scores[&11] - (half + 2f64.sqrt()) / 2.0).abs() < 1e-12);
        let err = score_dataset(|_| Err("boom"), &ex, &[3], 32).unwrap_err();
        assert!(matches!(err, Error::Callback { .. }));
    }

    #[test]
    fn binning_examples() {
        let s = scores(&(0..10).map(|i| (i, 1.0 - i as f64 / 10.0)).collect::<Vec<_>>());
        let b = bin_examples(&s, 10).unwrap();
        for i in 0..10 {
            assert_eq!(b[&i], 10 - i as usize);
        }
        let eq = scores(&(0..7).map(|i| (i, 0.3)).collect::<Vec<_>>());
        let b = bin_examples(&eq, 3).unwrap();
        assert_eq!(b.values().copied().collect::<Vec<_>>(), vec![1, 1, 1, 2, 2, 3, 3]);
        let big = scores(&(0..25).map(|i| (i, i as f64)).collect::<Vec<_>>());
        let b = bin_examples(&big, 10).unwrap();
        let mut sizes = vec![0; 10];
        b.values().for_each(|&v| sizes[v - 1] += 1);
        assert_eq!(sizes, vec![3, 3, 3, 3, 3, 2, 2, 2, 2, 2]);
    }

    #[test]
    fn loss_share_examples() {
        let bins: BTreeMap<u64, usize> = [(0, 1), (1, 1), (2, 2)].into();
        let s = loss_share_by_bin(0, &[(0, 1.0), (1, 1.0), (2, 2.0)], &bins, 2).unwrap();
        assert_eq!(s.shares, vec![0.5, 0.5]);
        let one: BTreeMap<u64, usize> = [(0, 1), (1, 1)].into();
        assert_eq!(loss_share_by_bin(0, &[(0, 0.2), (1, 0.3)], &one, 1).unwrap().shares, vec![1.0]);
        let z = loss_share_by_bin(0, &[(0, 0.0), (2, 0.0)], &bins, 2).unwrap();
        assert!(z.uniform_fallback);
        assert_eq!(z.shares, vec![0.5, 0.5]);
    }

    #[test]
    fn forgotten_truth_table() {
        let pp = |id, e, m| PredictionPair {
            example_id: id,
            label: 1,
            expert_pred: e,
            merged_pred: m,
        };
        let pairs = [pp(0, 1, 1), pp(1, 1, 0), pp(2, 0, 1), pp(3, 0, 0)];
        let bins: BTreeMap<u64, usize> = [(0, 1), (1, 4), (2, 2), (3, 3)].into();
        let f = forgotten_examples(&pairs, &bins);
        assert_eq!(f.examples.into_iter().collect::<Vec<_>>(), vec![1]);
        assert_eq!(f.by_bin, [(4, 1)].into());
    }

    #[test]
    fn pruning_examples() {
        assert_eq!(prune_count(1, 1.0), 1);
        assert_eq!(prune_count(10, 10.0), 1);
        assert_eq!(prune_count(25, 10.0), 3);
        let s = scores(&(1..=10).map(|i| (i, i as f64 / 10.0)).collect::<Vec<_>>());
        let ids: Vec<u64> = (1..=10).collect();
        let (kept, removed) = prune_hardest(&ids, &s, 10.0).unwrap();
        assert_eq!(removed, vec![10]);
        assert_eq!(kept.len(), 9);
        // equal scores: higher id goes first
        let t = scores(&[(1, 0.5), (2, 0.5), (3, 0.1)]);
        assert_eq!(prune_hardest(&[1, 2, 3], &t, 10.0).unwrap().1, vec![2]);
        assert!(prune_hardest(&ids, &s, 100.0).is_err());
    }
}
