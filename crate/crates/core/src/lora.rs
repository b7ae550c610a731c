//! Low-rank adapters: a layer's weight update is `(scale / rank) * B A`
//! with `A: [rank x n_in]` and `B: [n_out x rank]`.
//!
//! Merging always operates on materialized products, never on the `A` and
//! `B` factors separately.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::{Checkpoint, Meta, ParamMap, TaskVector};
use crate::error::{Error, Result};
use crate::merging::compute_task_vector;
use crate::rng::{derive_seed, hash_str};
use crate::store::{Archive, ArchiveKind};
use crate::tensor::{matmul_f64, Tensor};

/// Square-root scaling of the LoRA factor from `(8, 32)` upwards.
pub const SQRT_SCALING_PAIRS: [(usize, f64); 6] =
    [(8, 32.0), (16, 45.0), (32, 64.0), (64, 90.0), (128, 128.0), (256, 181.0)];

/// A `(rank, scale)` pair from a rank sweep.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RankScale {
    pub rank: usize,
    pub scale: f64,
}

impl RankScale {
    /// Configuration-level check. Whether the rank fits a particular
    /// layer is checked again when adapters are created.
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::argument("LoRA rank must be positive"));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::argument(format!("LoRA scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub scale: f64,
    pub layer_name: String,
}

impl LoraAdapter {
    pub fn new(layer_name: impl Into<String>, a: Tensor, b: Tensor, scale: f64) -> Result<Self> {
        let layer_name = layer_name.into();
        if a.rank() != 2 || b.rank() != 2 {
            return Err(Error::argument(format!("{layer_name}: LoRA factors must be matrices")));
        }
        let rank = a.rows();
        if b.cols() != rank {
            return Err(Error::argument(format!(
                "{layer_name}: A has {rank} rows but B has {} columns",
                b.cols()
            )));
        }
        check_rank(&layer_name, rank, a.cols(), b.rows())?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::argument(format!("{layer_name}: scale must be positive")));
        }
        Ok(LoraAdapter {
            a,
            b,
            rank,
            scale,
            layer_name,
        })
    }

    pub fn n_in(&self) -> usize {
        self.a.cols()
    }

    pub fn n_out(&self) -> usize {
        self.b.rows()
    }

    /// `scale / rank`, the multiplier on `B A`.
    pub fn factor(&self) -> f64 {
        self.scale / self.rank as f64
    }
}

fn check_rank(layer: &str, rank: usize, n_in: usize, n_out: usize) -> Result<()> {
    if rank == 0 || rank > n_in.min(n_out) {
        return Err(Error::argument(format!(
            "{layer}: rank {rank} invalid for a {n_out}x{n_in} layer (max {})",
            n_in.min(n_out)
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoraModel {
    pub adapters: BTreeMap<String, LoraAdapter>,
    pub base_ref: String,
}

/// `(layer name, n_out, n_in)` for every matrix parameter of `base`.
pub fn matrix_layers(base: &Checkpoint) -> Vec<(String, usize, usize)> {
    base.params
        .iter()
        .filter(|(_, t)| t.rank() == 2)
        .map(|(k, t)| (k.clone(), t.rows(), t.cols()))
        .collect()
}

/// Creates zero-delta adapters: `A ~ N(0, 1/n_in)` per layer from a seed
/// derived from `(seed, layer name)`, and `B = 0`.
pub fn lora_init(
    layers: &[(String, usize, usize)],
    rank: usize,
    scale: f64,
    seed: u64,
    base_ref: impl Into<String>,
) -> Result<LoraModel> {
    RankScale { rank, scale }.validate()?;
    let mut adapters = BTreeMap::new();
    for (name, n_out, n_in) in layers {
        check_rank(name, rank, *n_in, *n_out)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[hash_str(name)]));
        let normal = Normal::new(0.0, 1.0 / (*n_in as f64).sqrt()).expect("valid std");
        let a_data: Vec<f64> = (0..rank * n_in).map(|_| normal.sample(&mut rng)).collect();
        let a = Tensor::from_f64(vec![rank, *n_in], &a_data)?;
        let b = Tensor::zeros(&[*n_out, rank])?;
        adapters.insert(name.clone(), LoraAdapter::new(name.clone(), a, b, scale)?);
    }
    Ok(LoraModel {
        adapters,
        base_ref: base_ref.into(),
    })
}

/// `(scale / rank) * B A` as an `[n_out x n_in]` matrix.
pub fn materialize_delta(ad: &LoraAdapter) -> Tensor {
    let (n_out, r, n_in) = (ad.n_out(), ad.rank, ad.n_in());
    let mut prod = vec![0.0f64; n_out * n_in];
    matmul_f64(&ad.b.to_f64(), &ad.a.to_f64(), &mut prod, n_out, r, n_in);
    let f = ad.factor();
    prod.iter_mut().for_each(|v| *v *= f);
    Tensor::from_f64(vec![n_out, n_in], &prod).expect("finite product of finite factors")
}

fn check_targets(base: &Checkpoint, lm: &LoraModel) -> Result<()> {
    let mut bad = Vec::new();
    for (name, ad) in &lm.adapters {
        match base.params.get(name) {
            Some(w) if w.shape() == [ad.n_out(), ad.n_in()] => {}
            _ => bad.push(name.clone()),
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::incompatible("adapter layer missing or mis-shaped in base", bad))
    }
}

/// Adds each adapter's delta to its layer; other parameters are copied.
pub fn apply(base: &Checkpoint, lm: &LoraModel) -> Result<Checkpoint> {
    check_targets(base, lm)?;
    let mut params = base.params.clone();
    for (name, ad) in &lm.adapters {
        let delta = materialize_delta(ad);
        let w = &base.params[name];
        let sum: Vec<f64> = w
            .data()
            .iter()
            .zip(delta.data())
            .map(|(&a, &d)| f64::from(a) + f64::from(d))
            .collect();
        params.insert(name.clone(), Tensor::from_f64(w.shape().to_vec(), &sum)?);
    }
    let mut meta = base.meta.clone();
    meta.insert("lora.base_ref".into(), lm.base_ref.clone());
    Checkpoint::with_meta(params, meta)
}

/// Task vector of a LoRA-adapted model: the delta the adapted checkpoint
/// carries relative to `base` (materialized products on adapted layers,
/// exact zeros elsewhere). Defined through [`apply`] so that merging these
/// vectors and merging `apply` outputs agree bit for bit.
pub fn lora_task_vector(lm: &LoraModel, base: &Checkpoint, source_task: &str) -> Result<TaskVector> {
    let adapted = apply(base, lm)?;
    let mut tv = compute_task_vector(&adapted, base)?;
    tv.source_task = source_task.to_string();
    Ok(tv)
}

/// Factored adapted-layer output `(W x + bias) + (scale / rank) B (A x)`.
pub fn lora_forward(w: &Tensor, bias: &Tensor, ad: &LoraAdapter, x: &Tensor) -> Result<Tensor> {
    let base = dense_forward_f64(w, bias, x)?;
    let delta = adapter_forward_f64(ad, x)?;
    let y: Vec<f64> = base.iter().zip(&delta).map(|(b, d)| b + d).collect();
    Ok(Tensor::from_f64(vec![y.len()], &y)?)
}

/// `W x + bias` in `f64`.
pub fn dense_forward_f64(w: &Tensor, bias: &Tensor, x: &Tensor) -> Result<Vec<f64>> {
    if w.rank() != 2 || x.rank() != 1 || w.cols() != x.len() || bias.len() != w.rows() {
        return Err(Error::Tensor(crate::TensorError::Dimension(format!(
            "dense layer {:?} with bias {:?} cannot take input {:?}",
            w.shape(),
            bias.shape(),
            x.shape()
        ))));
    }
    let xv = x.to_f64();
    let mut y = vec![0.0; w.rows()];
    matmul_f64(&w.to_f64(), &xv, &mut y, w.rows(), w.cols(), 1);
    for (v, &b) in y.iter_mut().zip(bias.data()) {
        *v += f64::from(b);
    }
    Ok(y)
}

/// `(scale / rank) B (A x)` in `f64`.
pub fn adapter_forward_f64(ad: &LoraAdapter, x: &Tensor) -> Result<Vec<f64>> {
    if x.rank() != 1 || x.len() != ad.n_in() {
        return Err(Error::Tensor(crate::TensorError::Dimension(format!(
            "adapter {} expects input length {}, got {:?}",
            ad.layer_name,
            ad.n_in(),
            x.shape()
        ))));
    }
    let mut u = vec![0.0; ad.rank];
    matmul_f64(&ad.a.to_f64(), &x.to_f64(), &mut u, ad.rank, ad.n_in(), 1);
    let mut y = vec![0.0; ad.n_out()];
    matmul_f64(&ad.b.to_f64(), &u, &mut y, ad.n_out(), ad.rank, 1);
    let f = ad.factor();
    y.iter_mut().for_each(|v| *v *= f);
    Ok(y)
}

impl LoraModel {
    /// Shared rank and scale, or `None` for an empty model.
    pub fn rank_scale(&self) -> Option<RankScale> {
        self.adapters.values().next().map(|a| RankScale {
            rank: a.rank,
            scale: a.scale,
        })
    }

    /// Stored as a `taskvector` archive with `<layer>.A` / `<layer>.B`
    /// entries and `rank` / `scale` meta keys.
    pub fn to_archive(&self, source_task: &str) -> Archive {
        let mut meta = Meta::new();
        meta.insert("lora".into(), "1".into());
        meta.insert("base_ref".into(), self.base_ref.clone());
        meta.insert(crate::store::SOURCE_TASK_KEY.into(), source_task.into());
        if let Some(rs) = self.rank_scale() {
            meta.insert("rank".into(), rs.rank.to_string());
            meta.insert("scale".into(), rs.scale.to_string());
        }
        let mut tensors = ParamMap::new();
        for (name, ad) in &self.adapters {
            tensors.insert(format!("{name}.A"), ad.a.clone());
            tensors.insert(format!("{name}.B"), ad.b.clone());
        }
        Archive {
            kind: ArchiveKind::TaskVector,
            meta,
            tensors,
        }
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        if archive.kind != ArchiveKind::TaskVector || archive.meta.get("lora").map(String::as_str) != Some("1") {
            return Err(Error::argument("archive does not hold a LoRA model"));
        }
        let scale: f64 = archive
            .meta
            .get("scale")
            .map(|s| s.parse())
            .transpose()
            .map_err(|_| Error::argument("bad LoRA scale"))?
            .unwrap_or(1.0);
        let mut adapters = BTreeMap::new();
        for (key, a) in &archive.tensors {
            let Some(layer) = key.strip_suffix(".A") else {
                continue;
            };
            let b = archive
                .tensors
                .get(&format!("{layer}.B"))
                .ok_or_else(|| Error::argument(format!("missing {layer}.B")))?;
            adapters.insert(
                layer.to_string(),
                LoraAdapter::new(layer, a.clone(), b.clone(), scale)?,
            );
        }
        if archive.tensors.len() != 2 * adapters.len() {
            return Err(Error::argument("unpaired LoRA factor entries"));
        }
        let lm = LoraModel {
            adapters,
            base_ref: archive.meta.get("base_ref").cloned().unwrap_or_default(),
        };
        if let (Some(rs), Some(r)) = (lm.rank_scale(), archive.meta.get("rank")) {
            if r.parse::<usize>().ok() != Some(rs.rank) {
                return Err(Error::argument("rank meta disagrees with factor shapes"));
            }
        }
        Ok(lm)
    }
}
