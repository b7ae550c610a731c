//! Named parameter collections: full checkpoints and task vectors.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameter map keyed by name. `BTreeMap` keeps lexicographic order, which
/// is also the order tensors are laid out on disk.
pub type ParamMap = BTreeMap<String, Tensor>;

pub type Meta = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub params: ParamMap,
    pub meta: Meta,
}

/// Per-parameter difference `expert - base`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub deltas: ParamMap,
    pub source_task: String,
}

/// Names must be nonempty and free of control characters.
pub fn validate_name(name: &str) -> bool {
    !name.is_empty() && !name.chars().any(char::is_control)
}

impl Checkpoint {
    pub fn new(params: ParamMap) -> Result<Self> {
        Self::with_meta(params, Meta::new())
    }

    pub fn with_meta(params: ParamMap, meta: Meta) -> Result<Self> {
        if let Some(bad) = params.keys().find(|k| !validate_name(k)) {
            return Err(Error::argument(format!("invalid parameter name {bad:?}")));
        }
        Ok(Checkpoint { params, meta })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Names of parameters that are matrices.
    pub fn matrix_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, t)| t.rank() == 2)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        self.meta.insert(key.to_string(), value.into());
    }
}

impl TaskVector {
    pub fn new(deltas: ParamMap, source_task: impl Into<String>) -> Result<Self> {
        if let Some(bad) = deltas.keys().find(|k| !validate_name(k)) {
            return Err(Error::argument(format!("invalid parameter name {bad:?}")));
        }
        Ok(TaskVector {
            deltas,
            source_task: source_task.into(),
        })
    }

    /// All-zero task vector with the same layout as `base`.
    pub fn zeros_like(base: &Checkpoint, source_task: impl Into<String>) -> Self {
        let deltas = base
            .params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()).expect("shape already valid")))
            .collect();
        TaskVector {
            deltas,
            source_task: source_task.into(),
        }
    }

    pub fn num_elements(&self) -> usize {
        self.deltas.values().map(Tensor::len).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.deltas.values().all(Tensor::is_zero)
    }
}

/// Checks that two parameter maps share key sets and per-key shapes,
/// listing every offending name otherwise.
pub fn check_compatible(a: &ParamMap, b: &ParamMap) -> Result<()> {
    let mut bad: Vec<String> = Vec::new();
    for (name, t) in a {
        match b.get(name) {
            Some(u) if u.shape() == t.shape() => {}
            _ => bad.push(name.clone()),
        }
    }
    bad.extend(b.keys().filter(|k| !a.contains_key(*k)).cloned());
    if bad.is_empty() {
        Ok(())
    } else {
        bad.sort();
        bad.dedup();
        Err(Error::incompatible("key set or shape mismatch", bad))
    }
}
