//! Checkpoint merging: Average, Task Arithmetic, TIES and DARE, plus a
//! validation-driven grid search over their hyperparameters.
//!
//! All arithmetic on parameter values is carried out in `f64` and rounded
//! to `f32` once per output entry.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{check_compatible, Checkpoint, Meta, ParamMap, TaskVector};
use crate::error::{Error, Result};
use crate::rng::counter_uniform;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Average,
    TaskArithmetic,
    Ties,
    Dare,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 4] = [
        MergeMethod::Average,
        MergeMethod::TaskArithmetic,
        MergeMethod::Ties,
        MergeMethod::Dare,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MergeMethod::Average => "average",
            MergeMethod::TaskArithmetic => "task_arithmetic",
            MergeMethod::Ties => "ties",
            MergeMethod::Dare => "dare",
        }
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" | "avg" => Ok(MergeMethod::Average),
            "task_arithmetic" | "ta" => Ok(MergeMethod::TaskArithmetic),
            "ties" => Ok(MergeMethod::Ties),
            "dare" => Ok(MergeMethod::Dare),
            other => Err(Error::argument(format!("unknown merge method {other:?}"))),
        }
    }
}

/// One point of a merge hyperparameter grid.
///
/// `alpha` is ignored by `average`; `keep_pct` is used only by `ties`;
/// `drop_prob` and `seed` only by `dare`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub method: MergeMethod,
    pub alpha: f64,
    pub keep_pct: f64,
    pub drop_prob: f64,
    pub seed: u64,
}

impl MergeConfig {
    pub fn average() -> Self {
        MergeConfig {
            method: MergeMethod::Average,
            alpha: 1.0,
            keep_pct: 100.0,
            drop_prob: 0.0,
            seed: 0,
        }
    }

    pub fn task_arithmetic(alpha: f64) -> Self {
        MergeConfig {
            method: MergeMethod::TaskArithmetic,
            alpha,
            ..Self::average()
        }
    }

    pub fn ties(alpha: f64, keep_pct: f64) -> Self {
        MergeConfig {
            method: MergeMethod::Ties,
            alpha,
            keep_pct,
            ..Self::average()
        }
    }

    pub fn dare(alpha: f64, drop_prob: f64, seed: u64) -> Self {
        MergeConfig {
            method: MergeMethod::Dare,
            alpha,
            drop_prob,
            seed,
            ..Self::average()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method != MergeMethod::Average && !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::argument(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.method == MergeMethod::Ties && !(self.keep_pct > 0.0 && self.keep_pct <= 100.0) {
            return Err(Error::argument(format!(
                "keep_pct must lie in (0, 100], got {}",
                self.keep_pct
            )));
        }
        if self.method == MergeMethod::Dare && !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::argument(format!(
                "drop_prob must lie in [0, 1), got {}",
                self.drop_prob
            )));
        }
        Ok(())
    }
}

impl fmt::Display for MergeConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.method {
            MergeMethod::Average => write!(f, "average"),
            MergeMethod::TaskArithmetic => write!(f, "task_arithmetic(alpha={})", self.alpha),
            MergeMethod::Ties => write!(f, "ties(alpha={}, keep={}%)", self.alpha, self.keep_pct),
            MergeMethod::Dare => write!(
                f,
                "dare(alpha={}, drop={}, seed={})",
                self.alpha, self.drop_prob, self.seed
            ),
        }
    }
}

/// Default grids: TA alpha in {0.05..1.0}; TIES alpha in {0.5..1.5} x
/// keep in {10, 20, 30}; DARE alpha in {0.05..0.55} x retained
/// {10, 20, 30}% (drop_prob = 1 - k/100).
pub fn default_grid(method: MergeMethod, seed: u64) -> Vec<MergeConfig> {
    const KEEP: [f64; 3] = [10.0, 20.0, 30.0];
    match method {
        MergeMethod::Average => vec![MergeConfig::average()],
        MergeMethod::TaskArithmetic => (1..=20)
            .map(|i| MergeConfig::task_arithmetic(f64::from(i) * 5.0 / 100.0))
            .collect(),
        MergeMethod::Ties => (5..=15)
            .flat_map(|i| KEEP.iter().map(move |&k| MergeConfig::ties(f64::from(i) / 10.0, k)))
            .collect(),
        MergeMethod::Dare => (1..=11)
            .flat_map(|i| {
                KEEP.iter()
                    .map(move |&k| MergeConfig::dare(f64::from(i) * 5.0 / 100.0, 1.0 - k / 100.0, seed))
            })
            .collect(),
    }
}

fn source_id(ckpt: &Checkpoint, idx: usize) -> String {
    ckpt.meta
        .get("task")
        .or_else(|| ckpt.meta.get("model_id"))
        .cloned()
        .unwrap_or_else(|| format!("expert{idx}"))
}

/// `deltas[n] = expert[n] - base[n]`, one `f32` subtraction per entry.
pub fn compute_task_vector(expert: &Checkpoint, base: &Checkpoint) -> Result<TaskVector> {
    check_compatible(&expert.params, &base.params)?;
    let mut deltas = ParamMap::new();
    for (name, e) in &expert.params {
        deltas.insert(name.clone(), e.sub(&base.params[name])?);
    }
    TaskVector::new(deltas, source_id(expert, 0))
}

/// Adds `scale * tv` to `base`.
pub fn apply_task_vector(base: &Checkpoint, tv: &TaskVector, scale: f64) -> Result<Checkpoint> {
    combine(base, std::slice::from_ref(tv), scale, Meta::new())
}

/// `base + scale * Σ tvs`, accumulated in `f64` per entry.
fn combine(base: &Checkpoint, tvs: &[TaskVector], scale: f64, meta: Meta) -> Result<Checkpoint> {
    for tv in tvs {
        check_compatible(&base.params, &tv.deltas)?;
    }
    let mut params = ParamMap::new();
    for (name, b) in &base.params {
        let mut acc: Vec<f64> = vec![0.0; b.len()];
        for tv in tvs {
            for (a, &d) in acc.iter_mut().zip(tv.deltas[name].data()) {
                *a += f64::from(d);
            }
        }
        let out: Vec<f64> = b
            .data()
            .iter()
            .zip(&acc)
            .map(|(&bv, &s)| f64::from(bv) + scale * s)
            .collect();
        params.insert(name.clone(), Tensor::from_f64(b.shape().to_vec(), &out)?);
    }
    Checkpoint::with_meta(params, meta)
}

fn merge_meta(method: MergeMethod, ids: impl Iterator<Item = String>, extra: &[(&str, String)]) -> Meta {
    let mut meta = Meta::new();
    meta.insert("merge.method".into(), method.as_str().into());
    meta.insert("merge.experts".into(), ids.collect::<Vec<_>>().join(","));
    for (k, v) in extra {
        meta.insert(format!("merge.{k}"), v.clone());
    }
    meta
}

/// Per-parameter arithmetic mean of the experts.
pub fn merge_average(experts: &[Checkpoint]) -> Result<Checkpoint> {
    let first = experts
        .first()
        .ok_or_else(|| Error::argument("average needs at least one expert"))?;
    for e in &experts[1..] {
        check_compatible(&first.params, &e.params)?;
    }
    let n = experts.len() as f64;
    let mut params = ParamMap::new();
    for (name, t) in &first.params {
        let mut acc = vec![0.0f64; t.len()];
        for e in experts {
            for (a, &v) in acc.iter_mut().zip(e.params[name].data()) {
                *a += f64::from(v);
            }
        }
        acc.iter_mut().for_each(|a| *a /= n);
        params.insert(name.clone(), Tensor::from_f64(t.shape().to_vec(), &acc)?);
    }
    let meta = merge_meta(
        MergeMethod::Average,
        experts.iter().enumerate().map(|(i, e)| source_id(e, i)),
        &[],
    );
    Checkpoint::with_meta(params, meta)
}

/// Average expressed through task vectors: `base + mean(tvs)`.
fn average_from_task_vectors(base: &Checkpoint, tvs: &[TaskVector]) -> Result<Checkpoint> {
    if tvs.is_empty() {
        return Err(Error::argument("average needs at least one expert"));
    }
    let meta = merge_meta(MergeMethod::Average, tvs.iter().map(|t| t.source_task.clone()), &[]);
    combine(base, tvs, 1.0 / tvs.len() as f64, meta)
}

/// `base + alpha * Σ_t tvs[t]`.
pub fn merge_task_arithmetic(base: &Checkpoint, tvs: &[TaskVector], alpha: f64) -> Result<Checkpoint> {
    let meta = merge_meta(
        MergeMethod::TaskArithmetic,
        tvs.iter().map(|t| t.source_task.clone()),
        &[("alpha", alpha.to_string())],
    );
    combine(base, tvs, alpha, meta)
}

/// Keeps the `ceil(keep_pct% * N)` largest-magnitude entries across all
/// tensors of `tv` (one global threshold) and zeroes the rest. Ties at the
/// threshold keep the entry that comes first in (name, flat index) order.
pub fn ties_trim(tv: &TaskVector, keep_pct: f64) -> Result<TaskVector> {
    if !(keep_pct > 0.0 && keep_pct <= 100.0) {
        return Err(Error::argument(format!("keep_pct must lie in (0, 100], got {keep_pct}")));
    }
    let total = tv.num_elements();
    let keep = (((keep_pct * total as f64) / 100.0) - 1e-9).ceil().clamp(0.0, total as f64) as usize;
    if keep == total {
        return Ok(tv.clone());
    }

    // global flat order follows the BTreeMap name order
    let flat: Vec<f32> = tv.deltas.values().flat_map(|t| t.data().iter().copied()).collect();
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| flat[b].abs().total_cmp(&flat[a].abs()).then(a.cmp(&b)));
    let mut mask = vec![false; total];
    for &i in &order[..keep] {
        mask[i] = true;
    }

    let mut deltas = ParamMap::new();
    let mut offset = 0;
    for (name, t) in &tv.deltas {
        let data: Vec<f32> = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if mask[offset + i] { v } else { 0.0 })
            .collect();
        offset += t.len();
        deltas.insert(name.clone(), Tensor::new(t.shape().to_vec(), data)?);
    }
    Ok(TaskVector {
        deltas,
        source_task: tv.source_task.clone(),
    })
}

/// Sign election and disjoint mean. Per coordinate the elected sign is
/// the sign of the sum of values; the output is the mean of the nonzero
/// values carrying that sign. An exactly cancelling sum yields 0.
pub fn ties_elect_and_merge(trimmed: &[TaskVector]) -> Result<TaskVector> {
    let first = trimmed
        .first()
        .ok_or_else(|| Error::argument("TIES needs at least one task vector"))?;
    for tv in &trimmed[1..] {
        check_compatible(&first.deltas, &tv.deltas)?;
    }
    let mut deltas = ParamMap::new();
    for (name, t) in &first.deltas {
        let columns: Vec<&[f32]> = trimmed.iter().map(|tv| tv.deltas[name].data()).collect();
        let out: Vec<f64> = (0..t.len())
            .map(|i| {
                let sum: f64 = columns.iter().map(|c| f64::from(c[i])).sum();
                if sum == 0.0 {
                    return 0.0;
                }
                let (mut acc, mut count) = (0.0f64, 0usize);
                for c in &columns {
                    let v = f64::from(c[i]);
                    if v != 0.0 && (v > 0.0) == (sum > 0.0) {
                        acc += v;
                        count += 1;
                    }
                }
                if count == 0 {
                    0.0
                } else {
                    acc / count as f64
                }
            })
            .collect();
        deltas.insert(name.clone(), Tensor::from_f64(t.shape().to_vec(), &out)?);
    }
    Ok(TaskVector {
        deltas,
        source_task: trimmed
            .iter()
            .map(|t| t.source_task.as_str())
            .collect::<Vec<_>>()
            .join("+"),
    })
}

/// `base + alpha * elect_and_merge(trim(tvs))`.
pub fn merge_ties(base: &Checkpoint, tvs: &[TaskVector], alpha: f64, keep_pct: f64) -> Result<Checkpoint> {
    let trimmed = tvs
        .iter()
        .map(|tv| ties_trim(tv, keep_pct))
        .collect::<Result<Vec<_>>>()?;
    let merged = ties_elect_and_merge(&trimmed)?;
    let meta = merge_meta(
        MergeMethod::Ties,
        tvs.iter().map(|t| t.source_task.clone()),
        &[("alpha", alpha.to_string()), ("keep_pct", keep_pct.to_string())],
    );
    combine(base, std::slice::from_ref(&merged), alpha, meta)
}

/// Drops each entry independently with probability `drop_prob` and
/// rescales survivors by `1 / (1 - drop_prob)`. The draw for an entry is
/// keyed by `(seed, tensor name, flat index)`.
pub fn dare_drop_rescale(tv: &TaskVector, drop_prob: f64, seed: u64) -> Result<TaskVector> {
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(Error::argument(format!("drop_prob must lie in [0, 1), got {drop_prob}")));
    }
    let rescale = 1.0 / (1.0 - drop_prob);
    let mut deltas = ParamMap::new();
    for (name, t) in &tv.deltas {
        let out: Vec<f64> = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if counter_uniform(seed, name, i as u64) < drop_prob {
                    0.0
                } else {
                    f64::from(v) * rescale
                }
            })
            .collect();
        deltas.insert(name.clone(), Tensor::from_f64(t.shape().to_vec(), &out)?);
    }
    Ok(TaskVector {
        deltas,
        source_task: tv.source_task.clone(),
    })
}

/// Task arithmetic over DARE-processed task vectors; expert `t` uses seed
/// `seed + t`.
pub fn merge_dare(
    base: &Checkpoint,
    tvs: &[TaskVector],
    alpha: f64,
    drop_prob: f64,
    seed: u64,
) -> Result<Checkpoint> {
    let dropped = tvs
        .iter()
        .enumerate()
        .map(|(t, tv)| dare_drop_rescale(tv, drop_prob, seed.wrapping_add(t as u64)))
        .collect::<Result<Vec<_>>>()?;
    let meta = merge_meta(
        MergeMethod::Dare,
        tvs.iter().map(|t| t.source_task.clone()),
        &[
            ("alpha", alpha.to_string()),
            ("drop_prob", drop_prob.to_string()),
            ("seed", seed.to_string()),
        ],
    );
    combine(base, &dropped, alpha, meta)
}

/// Runs the merge described by `cfg`. `average` is computed as
/// `base + mean(tvs)`, i.e. the mean of the reconstructed experts.
pub fn merge(base: &Checkpoint, tvs: &[TaskVector], cfg: &MergeConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    match cfg.method {
        MergeMethod::Average => average_from_task_vectors(base, tvs),
        MergeMethod::TaskArithmetic => merge_task_arithmetic(base, tvs, cfg.alpha),
        MergeMethod::Ties => merge_ties(base, tvs, cfg.alpha, cfg.keep_pct),
        MergeMethod::Dare => merge_dare(base, tvs, cfg.alpha, cfg.drop_prob, cfg.seed),
    }
}

/// Evaluates every grid point and returns the one with the highest score;
/// ties go to the earliest grid position.
pub fn tune<F, E>(
    base: &Checkpoint,
    tvs: &[TaskVector],
    grid: &[MergeConfig],
    mut evaluate: F,
) -> Result<(MergeConfig, f64)>
where
    F: FnMut(&Checkpoint) -> std::result::Result<f64, E>,
    E: fmt::Display,
{
    if grid.is_empty() {
        return Err(Error::argument("empty tuning grid"));
    }
    let mut best: Option<(MergeConfig, f64)> = None;
    for cfg in grid {
        let merged = merge(base, tvs, cfg)?;
        let score = evaluate(&merged).map_err(|e| Error::Callback {
            context: cfg.to_string(),
            message: e.to_string(),
        })?;
        if best.as_ref().is_none_or(|(_, s)| score > *s) {
            best = Some((*cfg, score));
        }
    }
    Ok(best.expect("grid is nonempty"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt(w: &[f32]) -> Checkpoint {
        let mut params = ParamMap::new();
        params.insert("w".into(), Tensor::vector(w.to_vec()).unwrap());
        Checkpoint::new(params).unwrap()
    }

    fn tv(w: &[f32]) -> TaskVector {
        TaskVector::new(ckpt(w).params, "t").unwrap()
    }

    fn w(c: &Checkpoint) -> &[f32] {
        c.params["w"].data()
    }

    #[test]
    fn task_vector_basics() {
        let base = ckpt(&[1.0, 1.0]);
        let d = compute_task_vector(&ckpt(&[2.0, 0.0]), &base).unwrap();
        assert_eq!(d.deltas["w"].data(), &[1.0, -1.0]);
        assert!(compute_task_vector(&base, &base).unwrap().is_zero());
        let back = apply_task_vector(&base, &d, 1.0).unwrap();
        assert_eq!(w(&back), &[2.0, 0.0]);
    }

    #[test]
    fn incompatible_names_are_listed() {
        let mut other = ckpt(&[1.0, 1.0]);
        other.params.insert("extra".into(), Tensor::vector(vec![0.0]).unwrap());
        match compute_task_vector(&other, &ckpt(&[1.0, 1.0])) {
            Err(Error::Incompatible { names, .. }) => assert_eq!(names, vec!["extra".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
        let wrong_shape = ckpt(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            compute_task_vector(&wrong_shape, &ckpt(&[1.0, 1.0])),
            Err(Error::Incompatible { .. })
        ));
    }

    #[test]
    fn average_examples() {
        assert_eq!(w(&merge_average(&[ckpt(&[2., 4.]), ckpt(&[0., 0.])]).unwrap()), &[1., 2.]);
        assert_eq!(w(&merge_average(&[ckpt(&[1.]), ckpt(&[2.]), ckpt(&[6.])]).unwrap()), &[3.]);
        let e = ckpt(&[0.3, -7.1]);
        assert_eq!(w(&merge_average(&[e.clone(), e.clone()]).unwrap()), w(&e));
        assert!(matches!(merge_average(&[]), Err(Error::Argument(_))));
        let m = merge_average(&[ckpt(&[1.])]).unwrap();
        assert_eq!(m.meta["merge.method"], "average");
    }

    #[test]
    fn task_arithmetic_examples() {
        let base = ckpt(&[1., 1.]);
        let tvs = [tv(&[1., 0.]), tv(&[0., 1.])];
        assert_eq!(w(&merge_task_arithmetic(&base, &tvs, 0.3).unwrap()), &[1.3, 1.3]);
        assert_eq!(w(&merge_task_arithmetic(&base, &tvs, 0.0).unwrap()), &[1., 1.]);
    }

    #[test]
    fn ties_trim_examples() {
        let t = tv(&[0.1, -0.9, 0.2, 0.05, 0.7]);
        assert_eq!(ties_trim(&t, 20.0).unwrap().deltas["w"].data(), &[0., -0.9, 0., 0., 0.]);
        assert_eq!(ties_trim(&t, 100.0).unwrap(), t);
        assert!(ties_trim(&tv(&[0.0; 4]), 50.0).unwrap().is_zero());
        // equal magnitudes: earlier entries win
        let tied = tv(&[0.5, -0.5, 0.5]);
        assert_eq!(ties_trim(&tied, 50.0).unwrap().deltas["w"].data(), &[0.5, -0.5, 0.0]);
        assert!(ties_trim(&t, 0.0).is_err());
    }

    #[test]
    fn ties_trim_threshold_is_global() {
        let mut d = ParamMap::new();
        d.insert("a".into(), Tensor::vector(vec![0.1, 0.2]).unwrap());
        d.insert("b".into(), Tensor::vector(vec![5.0, 4.0]).unwrap());
        let trimmed = ties_trim(&TaskVector::new(d, "t").unwrap(), 50.0).unwrap();
        assert!(trimmed.deltas["a"].is_zero());
        assert_eq!(trimmed.deltas["b"].data(), &[5.0, 4.0]);
    }

    #[test]
    fn elect_examples() {
        let m = ties_elect_and_merge(&[tv(&[0.9]), tv(&[-0.1]), tv(&[0.2])]).unwrap();
        assert!((m.deltas["w"].data()[0] - 0.55).abs() < 1e-7);
        let c = ties_elect_and_merge(&[tv(&[0.5]), tv(&[-0.5])]).unwrap();
        assert_eq!(c.deltas["w"].data(), &[0.0]);
        let single = tv(&[0.3, -0.2, 0.0]);
        assert_eq!(ties_elect_and_merge(&[single.clone()]).unwrap().deltas, single.deltas);
    }

    #[test]
    fn ties_opposite_vectors_cancel() {
        let base = ckpt(&[1., 2., 3.]);
        let t = tv(&[0.4, -0.2, 0.9]);
        let neg = tv(&[-0.4, 0.2, -0.9]);
        assert_eq!(merge_ties(&base, &[t, neg], 1.0, 100.0).unwrap().params, base.params);
    }

    #[test]
    fn dare_examples() {
        let t = tv(&[0.25, -1.5, 3.0]);
        assert_eq!(dare_drop_rescale(&t, 0.0, 9).unwrap(), t);
        assert!(dare_drop_rescale(&t, 1.0, 9).is_err());
        let out = dare_drop_rescale(&t, 0.5, 9).unwrap();
        for (o, v) in out.deltas["w"].data().iter().zip(t.deltas["w"].data()) {
            assert!(*o == 0.0 || *o == 2.0 * v);
        }
        let base = ckpt(&[1., 1., 1.]);
        let a = merge_dare(&base, &[t.clone()], 0.5, 0.3, 4).unwrap();
        let b = merge_dare(&base, &[t.clone()], 0.5, 0.3, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            merge_dare(&base, &[t.clone()], 0.5, 0.0, 4).unwrap().params,
            merge_task_arithmetic(&base, &[t], 0.5).unwrap().params
        );
    }

    #[test]
    fn default_grids_match_published_ranges() {
        let ta = default_grid(MergeMethod::TaskArithmetic, 0);
        assert_eq!(ta.len(), 20);
        assert_eq!(ta[0].alpha, 0.05);
        assert_eq!(ta[19].alpha, 1.0);
        let ties = default_grid(MergeMethod::Ties, 0);
        assert_eq!(ties.len(), 33);
        assert_eq!((ties[0].alpha, ties[0].keep_pct), (0.5, 10.0));
        assert_eq!(ties[32].alpha, 1.5);
        let dare = default_grid(MergeMethod::Dare, 0);
        assert_eq!(dare.len(), 33);
        assert!((dare[0].drop_prob - 0.9).abs() < 1e-12);
        assert!((dare[32].alpha - 0.55).abs() < 1e-12);
        assert!((dare[32].drop_prob - 0.7).abs() < 1e-12);
        assert_eq!(default_grid(MergeMethod::Average, 0), vec![MergeConfig::average()]);
    }

    #[test]
    fn tune_tie_break_and_errors() {
        let base = ckpt(&[0.0]);
        let tvs = [tv(&[1.0])];
        let grid = default_grid(MergeMethod::TaskArithmetic, 0);
        let (best, score) = tune(&base, &tvs, &grid, |_| Ok::<_, String>(1.0)).unwrap();
        assert_eq!(best, grid[0]);
        assert_eq!(score, 1.0);
        assert!(tune(&base, &tvs, &[], |_| Ok::<_, String>(0.0)).is_err());
        let err = tune(&base, &tvs, &grid, |_| Err::<f64, _>("boom")).unwrap_err();
        assert!(matches!(err, Error::Callback { ref context, .. } if context.contains("alpha=0.05")));
    }
}
