//! Mixture-of-experts layers built from LoRA experts.
//!
//! A layer keeps its frozen `W x + bias` path and adds the renormalized
//! top-k mixture of expert outputs:
//!
//! ```text
//! π(x) = softmax(R x)
//! y    = W x + bias + Σ_{t∈I_k(x)} π_t E_t(x) / Σ_{t∈I_k(x)} π_t
//! E_t(x) = (scale_t / rank_t) B_t A_t x
//! ```
//!
//! Router rows can be initialized with the top right-singular vector of
//! each expert's `B A` product (Arrow).

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::{Checkpoint, Meta, ParamMap};
use crate::error::{Error, Result};
use crate::lora::{adapter_forward_f64, dense_forward_f64, materialize_delta, LoraAdapter, LoraModel};
use crate::rng::derive_seed;
use crate::store::{Archive, ArchiveKind};
use crate::tensor::{fix_sign, softmax_f64, top_right_singular_vector, Tensor, DEFAULT_POWER_ITERS};

pub const DEFAULT_TOP_K: usize = 2;

/// Power-iteration cap for Arrow rows. Early exit usually ends the
/// iteration well before this.
pub const ARROW_POWER_ITERS: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    pub name: String,
    pub w: Tensor,
    pub bias: Tensor,
    pub experts: Vec<LoraAdapter>,
    pub router: Tensor,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    /// Full softmax over all experts.
    pub probs: Vec<f64>,
    /// Indices of the `top_k` largest probabilities, descending; ties go to
    /// the lower index.
    pub selected: Vec<usize>,
    /// Renormalized weights, aligned with `selected`.
    pub weights: Vec<f64>,
}

impl RoutingDecision {
    pub fn weight_of(&self, expert: usize) -> f64 {
        self.selected
            .iter()
            .position(|&s| s == expert)
            .map_or(0.0, |i| self.weights[i])
    }
}

impl MoeLayer {
    pub fn new(
        name: impl Into<String>,
        w: Tensor,
        bias: Tensor,
        experts: Vec<LoraAdapter>,
        router: Tensor,
        top_k: usize,
    ) -> Result<Self> {
        let name = name.into();
        if w.rank() != 2 || bias.rank() != 1 || bias.len() != w.rows() {
            return Err(Error::argument(format!("{name}: bad base weight/bias shapes")));
        }
        if experts.is_empty() {
            return Err(Error::argument(format!("{name}: a MoE layer needs at least one expert")));
        }
        if !(1..=experts.len()).contains(&top_k) {
            return Err(Error::argument(format!(
                "{name}: top_k {top_k} outside 1..={}",
                experts.len()
            )));
        }
        let bad: Vec<String> = experts
            .iter()
            .enumerate()
            .filter(|(_, e)| e.n_in() != w.cols() || e.n_out() != w.rows())
            .map(|(i, _)| format!("{name}.expert{i}"))
            .collect();
        if !bad.is_empty() {
            return Err(Error::incompatible("expert shape differs from the base layer", bad));
        }
        if router.shape() != [experts.len(), w.cols()] {
            return Err(Error::argument(format!(
                "{name}: router shape {:?}, expected [{}, {}]",
                router.shape(),
                experts.len(),
                w.cols()
            )));
        }
        Ok(MoeLayer {
            name,
            w,
            bias,
            experts,
            router,
            top_k,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }
}

/// Indices of the `k` largest values, descending, lower index first on ties.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Routing from raw router logits.
pub fn route_logits(logits: &[f64], top_k: usize) -> RoutingDecision {
    let probs = softmax_f64(logits);
    let selected = top_k_indices(&probs, top_k.min(probs.len()));
    let total: f64 = selected.iter().map(|&t| probs[t]).sum();
    let weights = selected.iter().map(|&t| probs[t] / total).collect();
    RoutingDecision {
        probs,
        selected,
        weights,
    }
}

pub fn route(layer: &MoeLayer, x: &Tensor) -> Result<RoutingDecision> {
    if x.rank() != 1 || x.len() != layer.w.cols() {
        return Err(Error::Tensor(crate::TensorError::Dimension(format!(
            "{} expects input length {}, got {:?}",
            layer.name,
            layer.w.cols(),
            x.shape()
        ))));
    }
    let xv = x.to_f64();
    let logits: Vec<f64> = (0..layer.num_experts())
        .map(|t| {
            layer
                .router
                .row(t)
                .iter()
                .zip(&xv)
                .map(|(&r, &v)| f64::from(r) * v)
                .sum()
        })
        .collect();
    Ok(route_logits(&logits, layer.top_k))
}

/// Layer output for a single input vector.
pub fn moe_forward(layer: &MoeLayer, x: &Tensor) -> Result<Tensor> {
    let decision = route(layer, x)?;
    let mut y = dense_forward_f64(&layer.w, &layer.bias, x)?;
    for (&t, &wt) in decision.selected.iter().zip(&decision.weights) {
        let e = adapter_forward_f64(&layer.experts[t], x)?;
        for (yi, ei) in y.iter_mut().zip(e) {
            *yi += wt * ei;
        }
    }
    Ok(Tensor::from_f64(vec![y.len()], &y)?)
}

/// Router rows from each expert's top right-singular vector. Fails with
/// [`Error::DegenerateExpert`] on a zero delta.
pub fn arrow_init(experts: &[LoraAdapter], seed: u64) -> Result<Tensor> {
    let rows = experts
        .iter()
        .enumerate()
        .map(|(t, e)| arrow_row(e, t, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::from_rows(&rows)?)
}

fn arrow_row(expert: &LoraAdapter, index: usize, seed: u64) -> Result<Vec<f32>> {
    let delta = materialize_delta(expert);
    if delta.is_zero() {
        return Err(Error::DegenerateExpert {
            index,
            layer: expert.layer_name.clone(),
        });
    }
    let v = top_right_singular_vector(&delta, ARROW_POWER_ITERS, derive_seed(seed, &[index as u64]))?;
    Ok(v.into_data())
}

/// Seeded random unit row with the same sign convention as Arrow rows.
pub fn random_unit_row(dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    fix_sign(&mut v);
    v.into_iter().map(|x| x as f32).collect()
}

/// Arrow initialization with a seeded random unit row substituted for
/// every degenerate expert. Returns the router and the fallback indices.
pub fn arrow_init_with_fallback(experts: &[LoraAdapter], seed: u64) -> Result<(Tensor, Vec<usize>)> {
    let mut fallbacks = Vec::new();
    let mut rows = Vec::with_capacity(experts.len());
    for (t, e) in experts.iter().enumerate() {
        match arrow_row(e, t, seed) {
            Ok(r) => rows.push(r),
            Err(Error::DegenerateExpert { .. }) => {
                fallbacks.push(t);
                rows.push(random_unit_row(e.n_in(), derive_seed(seed, &[0xFA11, t as u64])));
            }
            Err(other) => return Err(other),
        }
    }
    Ok((Tensor::from_rows(&rows)?, fallbacks))
}

/// A base checkpoint whose adapted layers became MoE layers. The base
/// parameters are frozen; only routers and experts are trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel {
    pub base: Checkpoint,
    pub layers: BTreeMap<String, MoeLayer>,
    pub top_k: usize,
    pub init: String,
}

/// Bias parameter paired with a weight matrix: `x.weight` -> `x.bias`.
pub fn bias_name(weight_name: &str) -> String {
    match weight_name.strip_suffix(".weight") {
        Some(stem) => format!("{stem}.bias"),
        None => format!("{weight_name}.bias"),
    }
}

/// Replaces every adapted layer with a MoE layer holding one expert per
/// model, routers initialized with Arrow (random unit rows for zero-delta
/// experts).
pub fn moefy(base: &Checkpoint, expert_models: &[LoraModel], top_k: usize, seed: u64) -> Result<MoeModel> {
    let first = expert_models
        .first()
        .ok_or_else(|| Error::argument("moefy needs at least one expert model"))?;
    let coverage: Vec<&String> = first.adapters.keys().collect();
    let mut bad = Vec::new();
    for (i, m) in expert_models.iter().enumerate() {
        if m.adapters.keys().collect::<Vec<_>>() != coverage || m.base_ref != first.base_ref {
            bad.push(format!("expert_model{i}"));
        }
    }
    if !bad.is_empty() {
        return Err(Error::incompatible("expert models differ in base or layer coverage", bad));
    }

    let mut layers = BTreeMap::new();
    let mut any_fallback = false;
    for (li, name) in coverage.iter().enumerate() {
        let w = base
            .params
            .get(*name)
            .ok_or_else(|| Error::incompatible("adapted layer missing from base", vec![(*name).clone()]))?
            .clone();
        let bias = match base.params.get(&bias_name(name)) {
            Some(b) => b.clone(),
            None => Tensor::zeros(&[w.rows()])?,
        };
        let experts: Vec<LoraAdapter> = expert_models.iter().map(|m| m.adapters[*name].clone()).collect();
        let (router, fallbacks) = arrow_init_with_fallback(&experts, derive_seed(seed, &[li as u64]))?;
        any_fallback |= !fallbacks.is_empty();
        layers.insert(
            (*name).clone(),
            MoeLayer::new((*name).clone(), w, bias, experts, router, top_k)?,
        );
    }
    Ok(MoeModel {
        base: base.clone(),
        layers,
        top_k,
        init: if any_fallback { "arrow+random_fallback" } else { "arrow" }.into(),
    })
}

impl MoeModel {
    /// Base parameters under their own names plus `moe.<layer>.router` and
    /// `moe.<layer>.expert<t>.A` / `.B` entries.
    pub fn to_archive(&self) -> Archive {
        let mut tensors: ParamMap = self.base.params.clone();
        let mut meta: Meta = self.base.meta.clone();
        meta.insert("moe.top_k".into(), self.top_k.to_string());
        meta.insert("moe.init".into(), self.init.clone());
        meta.insert(
            "moe.layers".into(),
            self.layers.keys().cloned().collect::<Vec<_>>().join(","),
        );
        for (name, layer) in &self.layers {
            tensors.insert(format!("moe.{name}.router"), layer.router.clone());
            for (t, e) in layer.experts.iter().enumerate() {
                tensors.insert(format!("moe.{name}.expert{t}.A"), e.a.clone());
                tensors.insert(format!("moe.{name}.expert{t}.B"), e.b.clone());
                meta.insert(format!("moe.{name}.expert{t}.scale"), e.scale.to_string());
            }
        }
        Archive {
            kind: ArchiveKind::Checkpoint,
            meta,
            tensors,
        }
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let meta_get = |k: &str| {
            archive
                .meta
                .get(k)
                .ok_or_else(|| Error::argument(format!("MoE archive lacks meta {k:?}")))
        };
        let top_k: usize = meta_get("moe.top_k")?
            .parse()
            .map_err(|_| Error::argument("bad moe.top_k"))?;
        let init = meta_get("moe.init")?.clone();
        let names: Vec<String> = meta_get("moe.layers")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();

        let params: ParamMap = archive
            .tensors
            .iter()
            .filter(|(k, _)| !k.starts_with("moe."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let base_meta: Meta = archive
            .meta
            .iter()
            .filter(|(k, _)| !k.starts_with("moe."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let base = Checkpoint::with_meta(params, base_meta)?;

        let tensor = |k: String| {
            archive
                .tensors
                .get(&k)
                .cloned()
                .ok_or_else(|| Error::argument(format!("MoE archive lacks {k:?}")))
        };
        let mut layers = BTreeMap::new();
        for name in names {
            let router = tensor(format!("moe.{name}.router"))?;
            let mut experts = Vec::new();
            for t in 0..router.rows() {
                let scale: f64 = meta_get(&format!("moe.{name}.expert{t}.scale"))?
                    .parse()
                    .map_err(|_| Error::argument("bad expert scale"))?;
                experts.push(LoraAdapter::new(
                    name.clone(),
                    tensor(format!("moe.{name}.expert{t}.A"))?,
                    tensor(format!("moe.{name}.expert{t}.B"))?,
                    scale,
                )?);
            }
            let w = tensor(name.clone())?;
            let bias = match base.params.get(&bias_name(&name)) {
                Some(b) => b.clone(),
                None => Tensor::zeros(&[w.rows()])?,
            };
            layers.insert(name.clone(), MoeLayer::new(name, w, bias, experts, router, top_k)?);
        }
        Ok(MoeModel {
            base,
            layers,
            top_k,
            init,
        })
    }
}

/// Convenience for callers that only need the default cap.
pub fn dominant_direction(m: &Tensor, seed: u64) -> Result<Tensor> {
    Ok(top_right_singular_vector(m, DEFAULT_POWER_ITERS, seed)?)
}
