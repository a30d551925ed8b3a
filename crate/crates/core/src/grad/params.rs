use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "latent-qrl.params.v1";

/// Named parameter tensors. Names are dotted paths such as `encoder.l0.w`;
/// the first segment is the parameter group.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract("bindings", format!("unbound parameter {name}")))
    }

    pub fn insert(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    params: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::contract("params", format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count, optionally restricted to names under `group.`.
    pub fn count(&self, group: Option<&str>) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| group.is_none_or(|g| in_group(k, g)))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Moves every parameter of `other` into `self`.
    pub fn extend(&mut self, other: ParamSet) {
        self.params.extend(other.params);
    }

    /// Parameters under `group.`.
    pub fn subset(&self, group: &str) -> ParamSet {
        ParamSet {
            params: self
                .params
                .iter()
                .filter(|(k, _)| in_group(k, group))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Registers every parameter in the graph; names accepted by `trainable`
    /// become differentiable leaves, the rest constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Result<Bindings> {
        let mut b = Bindings::default();
        for (name, t) in &self.params {
            let v = if trainable(name) {
                g.param(name, t.clone())?
            } else {
                g.constant(t.clone())
            };
            b.insert(name, v);
        }
        Ok(b)
    }

    pub fn to_json(&self) -> Result<String> {
        for (name, t) in &self.params {
            if !t.is_finite() {
                return Err(Error::contract("checkpoint", format!("{name} has non-finite values")));
            }
        }
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            params: self.params.clone(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::contract("checkpoint", e.to_string()))
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let parse_err = |reason: String| Error::Parse {
            path: origin.to_path_buf(),
            reason,
        };
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(parse_err(format!("unknown checkpoint format {}", file.format)));
        }
        let mut params = BTreeMap::new();
        for (name, t) in file.params {
            // Re-validate the shape/data invariant skipped by serde.
            let t = Tensor::new(t.shape().to_vec(), t.into_data()).map_err(|e| parse_err(format!("{name}: {e}")))?;
            params.insert(name, t);
        }
        Ok(ParamSet { params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        crate::runner::io::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ParamSet::from_json(&text, path)
    }
}

pub(crate) fn in_group(name: &str, group: &str) -> bool {
    name.strip_prefix(group).is_some_and(|rest| rest.starts_with('.'))
}
