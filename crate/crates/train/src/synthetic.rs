//! Synthetic multi-task classification benchmark.
//!
//! All tasks share one set of class prototypes (a few Gaussian modes per
//! class); each task sees them through its own random rotation. Train
//! splits can carry relabeled "noisy" examples and displaced outliers,
//! which play the role of hard examples.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use upcycle_core::rng::derive_seed;

use crate::error::{Result, TrainError};

fn default_modes() -> usize {
    2
}

fn default_outlier_distance() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub input_dim: usize,
    pub cluster_spread: f64,
    pub noise_frac: f64,
    pub outlier_frac: f64,
    pub seed: u64,
    /// Seed of the class prototypes; tasks sharing it share prototypes.
    #[serde(default)]
    pub prototype_seed: u64,
    #[serde(default = "default_modes")]
    pub modes_per_class: usize,
    /// Outlier displacement in units of the typical cluster radius.
    #[serde(default = "default_outlier_distance")]
    pub outlier_distance: f64,
    /// First example id; ids run consecutively over train, val, test.
    #[serde(default)]
    pub id_base: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::argument(format!("task {}: {m}", self.task_id)));
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        if self.input_dim == 0 || self.n_train == 0 || self.modes_per_class == 0 {
            return bad("input_dim, n_train and modes_per_class must be positive");
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return bad("cluster_spread must be positive");
        }
        if !(0.0..1.0).contains(&self.noise_frac) || !(0.0..1.0).contains(&self.outlier_frac) {
            return bad("noise_frac and outlier_frac must lie in [0, 1)");
        }
        if !(self.outlier_distance >= 0.0) {
            return bad("outlier_distance must be nonnegative");
        }
        Ok(())
    }

    pub fn n_total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }
}

/// The desk-scale default benchmark: `n_tasks` related tasks, 32-d inputs,
/// 5 classes, 10% label noise. Data seeds derive from `seed`.
pub fn default_tasks(n_tasks: usize, seed: u64) -> Vec<TaskSpec> {
    (0..n_tasks)
        .map(|t| TaskSpec {
            task_id: format!("task{t}"),
            n_classes: 5,
            n_train: 2000,
            n_val: 400,
            n_test: 1000,
            input_dim: 32,
            cluster_spread: 1.25,
            noise_frac: 0.1,
            outlier_frac: 0.05,
            seed: derive_seed(seed, &[0xDA7A, t as u64]),
            prototype_seed: derive_seed(seed, &[0x9807]),
            modes_per_class: default_modes(),
            outlier_distance: default_outlier_distance(),
            id_base: t as u64 * 1_000_000,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// A set of labeled inputs; `tasks[i]` selects the head for example `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Examples {
    pub ids: Vec<u64>,
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
    pub tasks: Vec<usize>,
    pub is_noisy: Vec<bool>,
}

impl Examples {
    pub fn empty(dim: usize) -> Self {
        Examples {
            ids: Vec::new(),
            x: Array2::zeros((0, dim)),
            labels: Vec::new(),
            tasks: Vec::new(),
            is_noisy: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn subset(&self, rows: &[usize]) -> Examples {
        Examples {
            ids: rows.iter().map(|&i| self.ids[i]).collect(),
            x: self.x.select(Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            tasks: rows.iter().map(|&i| self.tasks[i]).collect(),
            is_noisy: rows.iter().map(|&i| self.is_noisy[i]).collect(),
        }
    }

    /// Same examples routed to head `task`.
    pub fn with_task(mut self, task: usize) -> Examples {
        self.tasks.iter_mut().for_each(|t| *t = task);
        self
    }

    pub fn concat(parts: &[&Examples]) -> Result<Examples> {
        let dim = parts
            .first()
            .map(|p| p.dim())
            .ok_or_else(|| TrainError::argument("nothing to concatenate"))?;
        if parts.iter().any(|p| p.dim() != dim) {
            return Err(TrainError::argument("input dimensions differ"));
        }
        let views: Vec<_> = parts.iter().map(|p| p.x.view()).collect();
        Ok(Examples {
            ids: parts.iter().flat_map(|p| p.ids.iter().copied()).collect(),
            x: ndarray::concatenate(Axis(0), &views).expect("same column count"),
            labels: parts.iter().flat_map(|p| p.labels.iter().copied()).collect(),
            tasks: parts.iter().flat_map(|p| p.tasks.iter().copied()).collect(),
            is_noisy: parts.iter().flat_map(|p| p.is_noisy.iter().copied()).collect(),
        })
    }

    /// Rows whose label was not corrupted.
    pub fn clean(&self) -> Examples {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| !self.is_noisy[i]).collect();
        self.subset(&rows)
    }

    /// Keeps the rows whose id is in `keep`, in order.
    pub fn retain_ids(&self, keep: &std::collections::BTreeSet<u64>) -> Examples {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep.contains(&self.ids[i])).collect();
        self.subset(&rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Examples,
    pub val: Examples,
    pub test: Examples,
    /// Labels of the train split before noise was applied.
    pub train_clean_labels: Vec<usize>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &Examples {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn set_task_index(mut self, task: usize) -> Dataset {
        self.train = self.train.with_task(task);
        self.val = self.val.with_task(task);
        self.test = self.test.with_task(task);
        self
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_column_slice(d, d, &gaussian(rng, d * d));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    // sign fix makes the distribution uniform over rotations
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Class prototypes `[class][mode] -> point`.
fn prototypes(spec: &TaskSpec) -> Vec<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.prototype_seed, &[0x9807]));
    (0..spec.n_classes)
        .map(|_| {
            (0..spec.modes_per_class)
                .map(|_| gaussian(&mut rng, spec.input_dim))
                .collect()
        })
        .collect()
}

fn draw_split(
    spec: &TaskSpec,
    protos: &[Vec<Vec<f64>>],
    rot: &DMatrix<f64>,
    rng: &mut ChaCha8Rng,
    n: usize,
    first_id: u64,
) -> Examples {
    let d = spec.input_dim;
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.n_classes).collect();
    labels.shuffle(rng);
    let mut x = Array2::zeros((n, d));
    for (i, &c) in labels.iter().enumerate() {
        let m = rng.random_range(0..spec.modes_per_class);
        let eps = gaussian(rng, d);
        let local: Vec<f64> = protos[c][m]
            .iter()
            .zip(&eps)
            .map(|(mu, e)| mu + spec.cluster_spread * e)
            .collect();
        let rotated = rot * nalgebra::DVector::from_vec(local);
        for j in 0..d {
            x[(i, j)] = rotated[j];
        }
    }
    Examples {
        ids: (0..n as u64).map(|i| first_id + i).collect(),
        x,
        labels,
        tasks: vec![0; n],
        is_noisy: vec![false; n],
    }
}

/// Generates one task. Fully determined by `spec`.
pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let protos = prototypes(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rot = random_rotation(&mut rng, spec.input_dim);

    let mut train = draw_split(spec, &protos, &rot, &mut rng, spec.n_train, spec.id_base);
    let val = draw_split(
        spec,
        &protos,
        &rot,
        &mut rng,
        spec.n_val,
        spec.id_base + spec.n_train as u64,
    );
    let test = draw_split(
        spec,
        &protos,
        &rot,
        &mut rng,
        spec.n_test,
        spec.id_base + (spec.n_train + spec.n_val) as u64,
    );
    let train_clean_labels = train.labels.clone();

    let n = spec.n_train;
    let n_noisy = (spec.noise_frac * n as f64).round() as usize;
    for i in index::sample(&mut rng, n, n_noisy).into_vec() {
        let shift = 1 + rng.random_range(0..spec.n_classes - 1);
        train.labels[i] = (train.labels[i] + shift) % spec.n_classes;
        train.is_noisy[i] = true;
    }

    let n_out = (spec.outlier_frac * n as f64).round() as usize;
    let radius = spec.outlier_distance * spec.cluster_spread * (spec.input_dim as f64).sqrt();
    for i in index::sample(&mut rng, n, n_out).into_vec() {
        let u = gaussian(&mut rng, spec.input_dim);
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (j, uj) in u.iter().enumerate() {
            train.x[(i, j)] += radius * uj / norm;
        }
    }

    Ok(Dataset {
        spec: spec.clone(),
        train,
        val,
        test,
        train_clean_labels,
    })
}

/// Writes `<stem>.csv` (example_id, split, label, is_noisy, f0..) and the
/// `<stem>.json` spec sidecar.
pub fn write_dataset(ds: &Dataset, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
    let mut header = vec!["example_id".to_string(), "split".into(), "label".into(), "is_noisy".into()];
    header.extend((0..ds.spec.input_dim).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let ex = ds.split(split);
        for i in 0..ex.len() {
            let mut rec = vec![
                ex.ids[i].to_string(),
                split.as_str().to_string(),
                ex.labels[i].to_string(),
                ex.is_noisy[i].to_string(),
            ];
            rec.extend(ex.x.row(i).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&ds.spec)? + "\n",
    )?;
    Ok(())
}

/// Reads the CSV/JSON pair written by [`write_dataset`]. Clean labels of
/// noisy rows are not stored, so `train_clean_labels` holds the stored
/// labels.
pub fn read_dataset(dir: &Path, stem: &str) -> Result<Dataset> {
    let spec: TaskSpec = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
    let d = spec.input_dim;
    let mut parts: [(Vec<u64>, Vec<f64>, Vec<usize>, Vec<bool>); 3] = Default::default();
    let mut r = csv::Reader::from_path(dir.join(format!("{stem}.csv")))?;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 4 + d {
            return Err(TrainError::argument(format!("row with {} fields, expected {}", rec.len(), 4 + d)));
        }
        let parse_err = |f: &str| TrainError::argument(format!("bad field {f:?}"));
        let slot = match &rec[1] {
            "train" => 0,
            "val" => 1,
            "test" => 2,
            other => return Err(parse_err(other)),
        };
        let p = &mut parts[slot];
        p.0.push(rec[0].parse().map_err(|_| parse_err(&rec[0]))?);
        p.2.push(rec[2].parse().map_err(|_| parse_err(&rec[2]))?);
        p.3.push(rec[3].parse().map_err(|_| parse_err(&rec[3]))?);
        for j in 0..d {
            p.1.push(rec[4 + j].parse().map_err(|_| parse_err(&rec[4 + j]))?);
        }
    }
    let [tr, va, te] = parts.map(|(ids, x, labels, noisy)| {
        let n = ids.len();
        Examples {
            ids,
            x: Array2::from_shape_vec((n, d), x).expect("row width checked"),
            labels,
            tasks: vec![0; n],
            is_noisy: noisy,
        }
    });
    Ok(Dataset {
        spec,
        train_clean_labels: tr.labels.clone(),
        train: tr,
        val: va,
        test: te,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> TaskSpec {
        TaskSpec {
            n_train: 500,
            n_val: 100,
            n_test: 200,
            ..default_tasks(1, seed).remove(0)
        }
    }

    #[test]
    fn deterministic_and_disjoint() {
        let a = generate(&small(3)).unwrap();
        assert_eq!(a, generate(&small(3)).unwrap());
        let mut ids: Vec<u64> = [&a.train, &a.val, &a.test].iter().flat_map(|e| e.ids.clone()).collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n);
        assert!(!a.val.is_noisy.iter().any(|&b| b) && !a.test.is_noisy.iter().any(|&b| b));
    }

    #[test]
    fn exact_noise_count() {
        let a = generate(&small(4)).unwrap();
        let flagged: Vec<usize> = (0..500).filter(|&i| a.train.is_noisy[i]).collect();
        assert_eq!(flagged.len(), 50);
        assert!(flagged.iter().all(|&i| a.train.labels[i] != a.train_clean_labels[i]));
        let clean = (0..500).filter(|&i| !a.train.is_noisy[i]);
        assert!(clean.into_iter().all(|i| a.train.labels[i] == a.train_clean_labels[i]));
    }

    #[test]
    fn rejects_bad_fractions() {
        let mut s = small(0);
        s.noise_frac = 1.0;
        assert!(generate(&s).is_err());
        s.noise_frac = -0.1;
        assert!(generate(&s).is_err());
    }
}
