use std::collections::BTreeMap;

use super::graph::{Graph, Var};
use super::params::{Bindings, ParamSet};
use crate::error::Result;

/// Central-difference step used by [`check_gradients`].
pub const FD_STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub tolerance: f64,
    pub per_param: BTreeMap<String, ParamCheck>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.per_param.values().all(|c| c.max_rel_error < self.tolerance)
    }

    pub fn max_error(&self) -> f64 {
        self.per_param.values().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn is_empty(&self) -> bool {
        self.per_param.is_empty()
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central finite differences for every element of every parameter.
pub fn check_gradients<F>(build: F, params: &ParamSet, tolerance: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var>,
{
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let b = p.bind(&mut g, |_| false)?;
        let out = build(&mut g, &b)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let b = params.bind(&mut g, |_| true)?;
    let loss = build(&mut g, &b)?;
    let grads = g.backward(loss)?;

    let mut per_param = BTreeMap::new();
    let mut probe = params.clone();
    for (name, t) in params.iter() {
        let analytic = grads.get(name).expect("every bound param has a gradient");
        let mut worst = ParamCheck {
            max_rel_error: 0.0,
            worst_index: 0,
        };
        for i in 0..t.len() {
            let x0 = t.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = x0 + FD_STEP;
            let fp = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = x0 - FD_STEP;
            let fm = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let err = relative_error(analytic.data()[i], numeric);
            if err > worst.max_rel_error || !err.is_finite() {
                worst = ParamCheck {
                    max_rel_error: if err.is_finite() { err } else { f64::INFINITY },
                    worst_index: i,
                };
            }
        }
        per_param.insert(name.to_string(), worst);
    }
    Ok(GradReport {
        tolerance,
        per_param,
    })
}
