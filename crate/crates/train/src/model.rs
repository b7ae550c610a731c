//! Small tanh MLP with per-task heads, optional LoRA or MoE adapters on
//! the backbone layers, and hand-derived backpropagation.
//!
//! Master weights are `f64`; checkpoints exported to the core crate are
//! rounded to `f32`.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use upcycle_core::lora::LoraModel;
use upcycle_core::moe::{route_logits, MoeLayer, MoeModel};
use upcycle_core::{Checkpoint, LoraAdapter, ParamMap, Tensor};

use crate::error::{Result, TrainError};
use crate::synthetic::Examples;

pub type Gradients = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn n_out(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_in(&self) -> usize {
        self.w.ncols()
    }

    fn affine(&self, input: &Array2<f64>) -> Array2<f64> {
        input.dot(&self.w.t()) + &self.b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors {
    /// `rank × n_in`
    pub a: Array2<f64>,
    /// `n_out × rank`
    pub b: Array2<f64>,
    pub scale: f64,
}

impl LoraFactors {
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn factor(&self) -> f64 {
        self.scale / self.rank() as f64
    }

    pub fn from_adapter(ad: &LoraAdapter) -> Self {
        LoraFactors {
            a: to_array2(&ad.a),
            b: to_array2(&ad.b),
            scale: ad.scale,
        }
    }

    pub fn to_adapter(&self, layer: &str) -> Result<LoraAdapter> {
        Ok(LoraAdapter::new(layer, to_tensor2(&self.a)?, to_tensor2(&self.b)?, self.scale)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeFactors {
    pub experts: Vec<LoraFactors>,
    /// `n_experts × n_in`
    pub router: Array2<f64>,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    None,
    Lora(LoraFactors),
    Moe(MoeFactors),
}

/// Which parameters an optimizer may touch; everything else is frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSet {
    /// Backbone and heads (pretraining).
    Full,
    /// Backbone weights and biases; heads frozen.
    Backbone,
    /// LoRA factors only.
    Lora,
    /// MoE routers and expert factors only.
    Moe,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<Dense>,
    pub adapters: Vec<Adapter>,
    pub heads: Vec<Dense>,
    pub task_ids: Vec<String>,
}

pub fn layer_weight_name(i: usize) -> String {
    format!("layer{i}.weight")
}

pub fn layer_bias_name(i: usize) -> String {
    format!("layer{i}.bias")
}

pub fn head_weight_name(task: &str) -> String {
    format!("head.{task}.weight")
}

pub fn head_bias_name(task: &str) -> String {
    format!("head.{task}.bias")
}

pub fn to_array2(t: &Tensor) -> Array2<f64> {
    Array2::from_shape_vec((t.rows(), t.cols()), t.to_f64()).expect("tensor shape")
}

pub fn to_array1(t: &Tensor) -> Array1<f64> {
    Array1::from_vec(t.to_f64())
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

pub fn to_tensor2(a: &Array2<f64>) -> Result<Tensor> {
    Ok(Tensor::from_f64(vec![a.nrows(), a.ncols()], &flat(a))?)
}

pub fn to_tensor1(a: &Array1<f64>) -> Result<Tensor> {
    Ok(Tensor::from_f64(vec![a.len()], &a.to_vec())?)
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

struct LayerCache {
    input: Array2<f64>,
    out: Array2<f64>,
    extra: AdapterCache,
}

enum AdapterCache {
    None,
    Lora { u: Array2<f64> },
    Moe {
        u: Vec<Array2<f64>>,
        e: Vec<Array2<f64>>,
        /// per row: (expert, renormalized weight)
        selection: Vec<Vec<(usize, f64)>>,
    },
}

/// Forward state kept for [`MlpModel::backward`].
pub struct Forward {
    pub logits: Vec<Vec<f64>>,
    caches: Vec<LayerCache>,
    hidden: Array2<f64>,
    tasks: Vec<usize>,
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// `logsumexp(logits) - logits[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

impl MlpModel {
    /// Backbone `input_dim -> hidden[0] -> ... -> hidden[last]` plus one
    /// head per `(task_id, n_classes)`. Weights ~ N(0, 1/fan_in), biases 0.
    pub fn init(input_dim: usize, hidden: &[usize], heads: &[(String, usize)], seed: u64) -> Result<Self> {
        if hidden.is_empty() || heads.is_empty() || input_dim == 0 {
            return Err(TrainError::argument("need an input, at least one hidden layer and one head"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut fan_in = input_dim;
        for &h in hidden {
            layers.push(Dense {
                w: gaussian_matrix(&mut rng, h, fan_in, (1.0 / fan_in as f64).sqrt()),
                b: Array1::zeros(h),
            });
            fan_in = h;
        }
        let heads_out = heads
            .iter()
            .map(|(_, c)| Dense {
                w: gaussian_matrix(&mut rng, *c, fan_in, (1.0 / fan_in as f64).sqrt()),
                b: Array1::zeros(*c),
            })
            .collect();
        Ok(MlpModel {
            adapters: vec![Adapter::None; layers.len()],
            layers,
            heads: heads_out,
            task_ids: heads.iter().map(|(t, _)| t.clone()).collect(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn n_classes(&self, task: usize) -> usize {
        self.heads[task].n_out()
    }

    pub fn task_index(&self, task_id: &str) -> Option<usize> {
        self.task_ids.iter().position(|t| t == task_id)
    }

    pub fn clear_adapters(&mut self) {
        self.adapters = vec![Adapter::None; self.layers.len()];
    }

    /// Backbone and heads as an `f32` checkpoint (adapters excluded).
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut p = ParamMap::new();
        for (i, l) in self.layers.iter().enumerate() {
            p.insert(layer_weight_name(i), to_tensor2(&l.w)?);
            p.insert(layer_bias_name(i), to_tensor1(&l.b)?);
        }
        for (t, h) in self.task_ids.iter().zip(&self.heads) {
            p.insert(head_weight_name(t), to_tensor2(&h.w)?);
            p.insert(head_bias_name(t), to_tensor1(&h.b)?);
        }
        let mut c = Checkpoint::new(p)?;
        c.set_meta("tasks", self.task_ids.join(","));
        Ok(c)
    }

    /// Rebuilds a plain model from a checkpoint holding `layer{i}.*` and
    /// `head.<task>.*` entries.
    pub fn from_checkpoint(ckpt: &Checkpoint, task_ids: &[String]) -> Result<Self> {
        let get = |n: &str| {
            ckpt.get(n)
                .ok_or_else(|| TrainError::argument(format!("checkpoint lacks {n:?}")))
        };
        let mut layers = Vec::new();
        while ckpt.get(&layer_weight_name(layers.len())).is_some() {
            let i = layers.len();
            layers.push(Dense {
                w: to_array2(get(&layer_weight_name(i))?),
                b: to_array1(get(&layer_bias_name(i))?),
            });
        }
        if layers.is_empty() {
            return Err(TrainError::argument("checkpoint has no backbone layers"));
        }
        let heads = task_ids
            .iter()
            .map(|t| {
                Ok(Dense {
                    w: to_array2(get(&head_weight_name(t))?),
                    b: to_array1(get(&head_bias_name(t))?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MlpModel {
            adapters: vec![Adapter::None; layers.len()],
            layers,
            heads,
            task_ids: task_ids.to_vec(),
        })
    }

    pub fn attach_lora(&mut self, lm: &LoraModel) -> Result<()> {
        self.clear_adapters();
        for (name, ad) in &lm.adapters {
            let i = self.layer_index(name)?;
            if ad.n_in() != self.layers[i].n_in() || ad.n_out() != self.layers[i].n_out() {
                return Err(TrainError::argument(format!("adapter {name} shape mismatch")));
            }
            self.adapters[i] = Adapter::Lora(LoraFactors::from_adapter(ad));
        }
        Ok(())
    }

    pub fn to_lora_model(&self, base_ref: &str) -> Result<LoraModel> {
        let mut adapters = BTreeMap::new();
        for (i, a) in self.adapters.iter().enumerate() {
            if let Adapter::Lora(f) = a {
                let name = layer_weight_name(i);
                adapters.insert(name.clone(), f.to_adapter(&name)?);
            }
        }
        Ok(LoraModel {
            adapters,
            base_ref: base_ref.into(),
        })
    }

    pub fn attach_moe(&mut self, moe: &MoeModel) -> Result<()> {
        self.clear_adapters();
        for (name, layer) in &moe.layers {
            let i = self.layer_index(name)?;
            self.adapters[i] = Adapter::Moe(MoeFactors {
                experts: layer.experts.iter().map(LoraFactors::from_adapter).collect(),
                router: to_array2(&layer.router),
                top_k: layer.top_k,
            });
        }
        Ok(())
    }

    /// MoE description over `base` with this model's routers and experts.
    pub fn to_moe_model(&self, base: &Checkpoint, init: &str) -> Result<MoeModel> {
        let mut layers = BTreeMap::new();
        let mut top_k = 1;
        for (i, a) in self.adapters.iter().enumerate() {
            if let Adapter::Moe(m) = a {
                let name = layer_weight_name(i);
                let experts = m
                    .experts
                    .iter()
                    .map(|e| e.to_adapter(&name))
                    .collect::<Result<Vec<_>>>()?;
                let w = base
                    .get(&name)
                    .ok_or_else(|| TrainError::argument(format!("base lacks {name}")))?
                    .clone();
                let bias = base
                    .get(&layer_bias_name(i))
                    .ok_or_else(|| TrainError::argument(format!("base lacks bias of {name}")))?
                    .clone();
                top_k = m.top_k;
                layers.insert(
                    name.clone(),
                    MoeLayer::new(name, w, bias, experts, to_tensor2(&m.router)?, m.top_k)?,
                );
            }
        }
        Ok(MoeModel {
            base: base.clone(),
            layers,
            top_k,
            init: init.into(),
        })
    }

    fn layer_index(&self, name: &str) -> Result<usize> {
        (0..self.layers.len())
            .find(|&i| layer_weight_name(i) == name)
            .ok_or_else(|| TrainError::argument(format!("no backbone layer named {name:?}")))
    }

    fn check_batch(&self, batch: &Examples) -> Result<()> {
        if batch.dim() != self.input_dim() {
            return Err(TrainError::argument(format!(
                "input dimension {} != model input {}",
                batch.dim(),
                self.input_dim()
            )));
        }
        for (&t, &y) in batch.tasks.iter().zip(&batch.labels) {
            if t >= self.heads.len() {
                return Err(TrainError::argument(format!("task index {t} has no head")));
            }
            if y >= self.n_classes(t) {
                return Err(TrainError::argument(format!(
                    "label {y} invalid for {} classes",
                    self.n_classes(t)
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>, tasks: &[usize]) -> Forward {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (layer, adapter) in self.layers.iter().zip(&self.adapters) {
            let mut z = layer.affine(&h);
            let extra = match adapter {
                Adapter::None => AdapterCache::None,
                Adapter::Lora(f) => {
                    let u = h.dot(&f.a.t());
                    z.scaled_add(f.factor(), &u.dot(&f.b.t()));
                    AdapterCache::Lora { u }
                }
                Adapter::Moe(m) => {
                    let logits = h.dot(&m.router.t());
                    let selection: Vec<Vec<(usize, f64)>> = logits
                        .rows()
                        .into_iter()
                        .map(|row| {
                            let d = route_logits(&row.to_vec(), m.top_k);
                            d.selected.into_iter().zip(d.weights).collect()
                        })
                        .collect();
                    let mut us = Vec::with_capacity(m.experts.len());
                    let mut es = Vec::with_capacity(m.experts.len());
                    for f in &m.experts {
                        let u = h.dot(&f.a.t());
                        let e = u.dot(&f.b.t()) * f.factor();
                        us.push(u);
                        es.push(e);
                    }
                    for (i, sel) in selection.iter().enumerate() {
                        let mut zi = z.row_mut(i);
                        for &(t, w) in sel {
                            zi.scaled_add(w, &es[t].row(i));
                        }
                    }
                    AdapterCache::Moe { u: us, e: es, selection }
                }
            };
            let out = z.mapv(f64::tanh);
            caches.push(LayerCache {
                input: h,
                out: out.clone(),
                extra,
            });
            h = out;
        }
        let logits = h
            .rows()
            .into_iter()
            .zip(tasks)
            .map(|(row, &t)| {
                let head = &self.heads[t];
                (head.w.dot(&row) + &head.b).to_vec()
            })
            .collect();
        Forward {
            logits,
            caches,
            hidden: h,
            tasks: tasks.to_vec(),
        }
    }

    /// Mean cross-entropy and per-example losses.
    pub fn forward_loss(&self, batch: &Examples) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(TrainError::argument("empty batch"));
        }
        self.check_batch(batch)?;
        let fwd = self.forward(batch.x.view(), &batch.tasks);
        let per: Vec<f64> = fwd
            .logits
            .iter()
            .zip(&batch.labels)
            .map(|(l, &y)| cross_entropy(l, y))
            .collect();
        Ok((per.iter().sum::<f64>() / per.len() as f64, per))
    }

    /// Loss, per-example losses and gradients of the mean loss for `set`.
    pub fn loss_and_grad(&self, batch: &Examples, set: ParamSet) -> Result<(f64, Vec<f64>, Gradients)> {
        if batch.is_empty() {
            return Err(TrainError::argument("empty batch"));
        }
        self.check_batch(batch)?;
        let fwd = self.forward(batch.x.view(), &batch.tasks);
        let per: Vec<f64> = fwd
            .logits
            .iter()
            .zip(&batch.labels)
            .map(|(l, &y)| cross_entropy(l, y))
            .collect();
        let grads = self.backward(&fwd, &batch.labels, set)?;
        Ok((per.iter().sum::<f64>() / per.len() as f64, per, grads))
    }

    /// Analytic gradients of the mean cross-entropy for the parameters in
    /// `set`. Frozen parameters get no entry.
    pub fn backward(&self, fwd: &Forward, labels: &[usize], set: ParamSet) -> Result<Gradients> {
        let n = labels.len();
        if n == 0 || n != fwd.logits.len() {
            return Err(TrainError::argument("labels do not match the forward batch"));
        }
        self.check_set(set)?;
        let mut grads = Gradients::new();
        let hidden_dim = fwd.hidden.ncols();
        let mut dh = Array2::<f64>::zeros((n, hidden_dim));
        let mut head_grads: Vec<Option<(Array2<f64>, Array1<f64>)>> = vec![None; self.heads.len()];
        for i in 0..n {
            let t = fwd.tasks[i];
            let mut g = softmax(&fwd.logits[i]);
            g[labels[i]] -= 1.0;
            g.iter_mut().for_each(|v| *v /= n as f64);
            let g = Array1::from_vec(g);
            let head = &self.heads[t];
            dh.row_mut(i).assign(&head.w.t().dot(&g));
            if set == ParamSet::Full {
                let entry = head_grads[t]
                    .get_or_insert_with(|| (Array2::zeros(head.w.raw_dim()), Array1::zeros(head.b.len())));
                let hrow = fwd.hidden.row(i);
                for c in 0..g.len() {
                    entry.0.row_mut(c).scaled_add(g[c], &hrow);
                }
                entry.1 += &g;
            }
        }
        if set == ParamSet::Full {
            for (t, hg) in head_grads.into_iter().enumerate() {
                let head = &self.heads[t];
                let (gw, gb) = hg.unwrap_or_else(|| (Array2::zeros(head.w.raw_dim()), Array1::zeros(head.b.len())));
                grads.insert(head_weight_name(&self.task_ids[t]), flat(&gw));
                grads.insert(head_bias_name(&self.task_ids[t]), gb.to_vec());
            }
        }

        let mut dout = dh;
        for l in (0..self.layers.len()).rev() {
            let cache = &fwd.caches[l];
            let layer = &self.layers[l];
            let dz = &dout * &cache.out.mapv(|o| 1.0 - o * o);
            let need_input = l > 0;
            if matches!(set, ParamSet::Full | ParamSet::Backbone) {
                grads.insert(layer_weight_name(l), flat(&dz.t().dot(&cache.input)));
                grads.insert(layer_bias_name(l), dz.sum_axis(Axis(0)).to_vec());
            }
            let mut dinput = if need_input { Some(dz.dot(&layer.w)) } else { None };
            match (&self.adapters[l], &cache.extra) {
                (Adapter::None, _) => {}
                (Adapter::Lora(f), AdapterCache::Lora { u }) => {
                    let du = dz.dot(&f.b) * f.factor();
                    if set == ParamSet::Lora {
                        let name = layer_weight_name(l);
                        grads.insert(format!("{name}.A"), flat(&du.t().dot(&cache.input)));
                        grads.insert(format!("{name}.B"), flat(&(dz.t().dot(u) * f.factor())));
                    }
                    if let Some(di) = dinput.as_mut() {
                        *di += &du.dot(&f.a);
                    }
                }
                (Adapter::Moe(m), AdapterCache::Moe { u, e, selection }) => {
                    let n_exp = m.experts.len();
                    let mut dlogit = Array2::<f64>::zeros((n, n_exp));
                    let mut gate = Array2::<f64>::zeros((n, n_exp));
                    for (i, sel) in selection.iter().enumerate() {
                        let dzi = dz.row(i);
                        let g: Vec<f64> = sel.iter().map(|&(t, _)| dzi.dot(&e[t].row(i))).collect();
                        let mean: f64 = sel.iter().zip(&g).map(|(&(_, w), gv)| w * gv).sum();
                        for (&(t, w), gv) in sel.iter().zip(&g) {
                            dlogit[(i, t)] = w * (gv - mean);
                            gate[(i, t)] = w;
                        }
                    }
                    let name = layer_weight_name(l);
                    if set == ParamSet::Moe {
                        grads.insert(format!("moe.{name}.router"), flat(&dlogit.t().dot(&cache.input)));
                    }
                    if let Some(di) = dinput.as_mut() {
                        *di += &dlogit.dot(&m.router);
                    }
                    for (t, f) in m.experts.iter().enumerate() {
                        let dzt = &dz * &gate.column(t).insert_axis(Axis(1));
                        let du = dzt.dot(&f.b) * f.factor();
                        if set == ParamSet::Moe {
                            grads.insert(format!("moe.{name}.expert{t}.A"), flat(&du.t().dot(&cache.input)));
                            grads.insert(
                                format!("moe.{name}.expert{t}.B"),
                                flat(&(dzt.t().dot(&u[t]) * f.factor())),
                            );
                        }
                        if let Some(di) = dinput.as_mut() {
                            *di += &du.dot(&f.a);
                        }
                    }
                }
                _ => unreachable!("cache kind follows the adapter"),
            }
            if let Some(di) = dinput {
                dout = di;
            }
        }
        Ok(grads)
    }

    fn check_set(&self, set: ParamSet) -> Result<()> {
        let ok = match set {
            ParamSet::Full | ParamSet::Backbone => true,
            ParamSet::Lora => self.adapters.iter().any(|a| matches!(a, Adapter::Lora(_))),
            ParamSet::Moe => self.adapters.iter().any(|a| matches!(a, Adapter::Moe(_))),
        };
        if ok {
            Ok(())
        } else {
            Err(TrainError::argument(format!("model has no parameters for {set:?}")))
        }
    }

    /// Trainable parameters of `set` as named mutable slices, in a fixed
    /// order.
    pub fn params_mut(&mut self, set: ParamSet) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (i, (layer, adapter)) in self.layers.iter_mut().zip(self.adapters.iter_mut()).enumerate() {
            let name = layer_weight_name(i);
            match set {
                ParamSet::Full | ParamSet::Backbone => {
                    out.push((name, layer.w.as_slice_mut().expect("standard layout")));
                    out.push((layer_bias_name(i), layer.b.as_slice_mut().expect("standard layout")));
                }
                ParamSet::Lora => {
                    if let Adapter::Lora(f) = adapter {
                        out.push((format!("{name}.A"), f.a.as_slice_mut().expect("standard layout")));
                        out.push((format!("{name}.B"), f.b.as_slice_mut().expect("standard layout")));
                    }
                }
                ParamSet::Moe => {
                    if let Adapter::Moe(m) = adapter {
                        out.push((format!("moe.{name}.router"), m.router.as_slice_mut().expect("standard layout")));
                        for (t, f) in m.experts.iter_mut().enumerate() {
                            out.push((format!("moe.{name}.expert{t}.A"), f.a.as_slice_mut().expect("standard layout")));
                            out.push((format!("moe.{name}.expert{t}.B"), f.b.as_slice_mut().expect("standard layout")));
                        }
                    }
                }
            }
        }
        if set == ParamSet::Full {
            for (t, h) in self.task_ids.iter().zip(self.heads.iter_mut()) {
                out.push((head_weight_name(t), h.w.as_slice_mut().expect("standard layout")));
                out.push((head_bias_name(t), h.b.as_slice_mut().expect("standard layout")));
            }
        }
        out
    }

    /// Class probabilities for every example, evaluated in chunks.
    pub fn predict_proba(&self, ex: &Examples) -> Result<Vec<Vec<f64>>> {
        self.check_batch(ex)?;
        let mut out = Vec::with_capacity(ex.len());
        const CHUNK: usize = 1024;
        let mut start = 0;
        while start < ex.len() {
            let end = (start + CHUNK).min(ex.len());
            let fwd = self.forward(ex.x.slice(ndarray::s![start..end, ..]), &ex.tasks[start..end]);
            out.extend(fwd.logits.iter().map(|l| softmax(l)));
            start = end;
        }
        Ok(out)
    }

    pub fn predict(&self, ex: &Examples) -> Result<Vec<usize>> {
        Ok(self
            .predict_proba(ex)?
            .iter()
            .map(|p| {
                // first maximum wins
                p.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, ex: &Examples) -> Result<f64> {
        if ex.is_empty() {
            return Err(TrainError::argument("accuracy of an empty split"));
        }
        let pred = self.predict(ex)?;
        let hits = pred.iter().zip(&ex.labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / ex.len() as f64)
    }
}
