use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{in_group, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerKind {
    /// `θ ← θ − lr·g`.
    Plain,
    /// Adaptive moment estimation with bias correction:
    /// `m ← β1·m + (1−β1)·g`, `v ← β2·v + (1−β2)·g²`,
    /// `θ ← θ − lr·m̂ / (√v̂ + ε)` with `m̂ = m/(1−β1^t)`, `v̂ = v/(1−β2^t)`.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Gradient-descent optimizer over a [`ParamSet`] with optional per-group
/// learning rates.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    group_lr: BTreeMap<String, f64>,
    moments: BTreeMap<String, Moments>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            group_lr: BTreeMap::new(),
            moments: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn plain(lr: f64) -> Self {
        Optimizer::new(OptimizerKind::Plain, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer::new(OptimizerKind::default(), lr)
    }

    pub fn with_group_lr(mut self, group: &str, lr: f64) -> Self {
        self.group_lr.insert(group.to_string(), lr);
        self
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr_for(&self, name: &str) -> f64 {
        self.group_lr
            .iter()
            .find(|(g, _)| in_group(name, g))
            .map(|(_, &lr)| lr)
            .unwrap_or(self.lr)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update for every parameter that has a gradient; parameters
    /// without a gradient entry are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::contract("optimizer", format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::contract(
                    "optimizer",
                    format!("{name}: parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (name, g) in grads {
            let lr = self.lr_for(name);
            let p = params.get_mut(name).expect("checked above");
            match self.kind {
                OptimizerKind::Plain => {
                    for (x, gi) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= lr * gi;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                        m: vec![0.0; g.len()],
                        v: vec![0.0; g.len()],
                    });
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((x, gi), m), v) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(mom.m.iter_mut())
                        .zip(mom.v.iter_mut())
                    {
                        *m = beta1 * *m + (1.0 - beta1) * gi;
                        *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                        *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// One plain gradient-descent step, `param − lr·grad`.
pub fn sgd_step(params: &mut ParamSet, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
    Optimizer::plain(lr).step(params, grads)
}
