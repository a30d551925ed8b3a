//! Proximal policy optimization with the joint autoencoder objective.
//!
//! The minimized loss per minibatch is
//! `−L^CLIP − c1·S + c_vf·L^VF + c2·Reg + c_AE·L^AE`, with `Reg` the sum of
//! squares of all trainable parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{mse, Graph, Tensor, Var};

mod agent;

pub use agent::{
    collect_rollout, joint_update, minibatch_loss, train_agent, write_update_log, Actor, Agent, Decision,
    EpisodeStream, PolicyNet, Rollout, Targets, TrainMode, TrainOutcome, UpdateLog, POLICY_PARAM,
};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoHyper {
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    /// Entropy bonus weight `c1`.
    pub c_entropy: f64,
    /// L2 penalty weight `c2`.
    pub c_reg: f64,
    pub c_ae: f64,
    pub c_vf: f64,
    pub lr: f64,
    /// Learning-rate overrides keyed by parameter group.
    pub group_lr: BTreeMap<String, f64>,
    pub rollout_len: usize,
    pub minibatch: usize,
    pub epochs: usize,
    pub normalize_advantages: bool,
}

impl Default for PpoHyper {
    fn default() -> Self {
        PpoHyper {
            gamma: 0.99,
            lambda: 0.95,
            clip_eps: 0.2,
            c_entropy: 0.01,
            c_reg: 1e-4,
            c_ae: 1.0,
            c_vf: 0.5,
            lr: 3e-3,
            group_lr: BTreeMap::new(),
            rollout_len: 512,
            minibatch: 64,
            epochs: 4,
            normalize_advantages: true,
        }
    }
}

impl PpoHyper {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        let mut bad = Vec::new();
        if !open_unit(self.gamma) {
            bad.push(format!("gamma {} outside (0, 1)", self.gamma));
        }
        if !open_unit(self.lambda) {
            bad.push(format!("lambda {} outside (0, 1)", self.lambda));
        }
        if !open_unit(self.clip_eps) {
            bad.push(format!("clip_eps {} outside (0, 1)", self.clip_eps));
        }
        for (name, v) in [
            ("c_entropy", self.c_entropy),
            ("c_reg", self.c_reg),
            ("c_ae", self.c_ae),
            ("c_vf", self.c_vf),
            ("lr", self.lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                bad.push(format!("{name} {v} must be finite and non-negative"));
            }
        }
        if self.group_lr.values().any(|v| !(*v >= 0.0 && v.is_finite())) {
            bad.push("group learning rates must be finite and non-negative".into());
        }
        if self.rollout_len == 0 || self.minibatch == 0 || self.epochs == 0 {
            bad.push("rollout_len, minibatch and epochs must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// `r` clamped to `[1 − ε, 1 + ε]`.
pub fn clip_ratio(r: f64, eps: f64) -> f64 {
    if r < 1.0 - eps {
        1.0 - eps
    } else if r > 1.0 + eps {
        1.0 + eps
    } else {
        r
    }
}

/// Generalized advantage estimation over a buffer that may span episodes.
///
/// `next_values[t]` is `V(s_{t+1})` for the observation that followed step
/// `t` (ignored when `terminated[t]`). `episode_end[t]` stops the advantage
/// recursion, so a truncated episode bootstraps from `next_values` but does
/// not leak into the following episode. Returns `(advantages, returns)` with
/// `returns = advantages + values`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    terminated: &[bool],
    episode_end: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if [values.len(), next_values.len(), terminated.len(), episode_end.len()]
        .iter()
        .any(|&l| l != n)
    {
        return Err(Error::contract(
            "gae",
            format!(
                "lengths differ: rewards {n}, values {}, next values {}, terminated {}, ends {}",
                values.len(),
                next_values.len(),
                terminated.len(),
                episode_end.len()
            ),
        ));
    }
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let bootstrap = if terminated[t] { 0.0 } else { next_values[t] };
        let delta = rewards[t] + gamma * bootstrap - values[t];
        if episode_end[t] || t + 1 == n {
            running = 0.0;
        }
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Zero mean, unit variance (population statistics, `1e-8` added to the
/// standard deviation).
pub fn normalize(xs: &mut [f64]) {
    if xs.len() < 2 {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt() + 1e-8;
    xs.iter_mut().for_each(|x| *x = (*x - mean) / sd);
}

/// Minibatch quantities fixed at collection time.
#[derive(Clone, Copy, Debug)]
pub struct PpoBatch<'a> {
    pub actions: &'a [usize],
    pub old_log_probs: &'a [f64],
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
}

/// Graph nodes of the PPO objective.
#[derive(Clone, Copy, Debug)]
pub struct PpoTerms {
    /// Clipped surrogate `L^CLIP` (to be maximized).
    pub clip: Var,
    /// Critic mean-squared error `L^VF`.
    pub value: Var,
    /// Mean policy entropy `S`.
    pub entropy: Var,
    /// Sum of squared trainable parameters.
    pub reg: Var,
    /// `−L^CLIP − c1·S + c_vf·L^VF + c2·Reg`.
    pub total: Var,
}

/// Builds the PPO loss from action probabilities `[B, K]` and values `[B]`.
pub fn ppo_loss(
    g: &mut Graph,
    probs: Var,
    values: Var,
    batch: &PpoBatch<'_>,
    reg_params: &[Var],
    hyper: &PpoHyper,
) -> Result<PpoTerms> {
    let b = batch.actions.len();
    if [batch.old_log_probs.len(), batch.advantages.len(), batch.returns.len()]
        .iter()
        .any(|&l| l != b)
        || g.value(probs).shape().first() != Some(&b)
    {
        return Err(Error::contract("ppo_loss", "batch fields and probabilities disagree in length"));
    }
    let picked = g.gather(probs, batch.actions)?;
    let picked = g.clip(picked, PROB_FLOOR, 1.0)?;
    let logp = g.log(picked);
    let old = g.constant(Tensor::vector(batch.old_log_probs.to_vec()));
    let diff = g.sub(logp, old)?;
    let ratio = g.exp(diff);
    let adv = g.constant(Tensor::vector(batch.advantages.to_vec()));
    let s1 = g.mul(ratio, adv)?;
    let clipped = g.clip(ratio, 1.0 - hyper.clip_eps, 1.0 + hyper.clip_eps)?;
    let s2 = g.mul(clipped, adv)?;
    let surrogate = g.minimum(s1, s2)?;
    let clip = g.mean(surrogate)?;

    let floored = g.clip(probs, PROB_FLOOR, 1.0)?;
    let logs = g.log(floored);
    let plogp = g.mul(probs, logs)?;
    let row = g.sum_last(plogp)?;
    let neg_entropy = g.mean(row)?;
    let entropy = g.neg(neg_entropy);

    let targets = g.constant(Tensor::vector(batch.returns.to_vec()));
    let v = g.reshape(values, &[b])?;
    let value = mse(g, v, targets)?;

    let mut reg = g.constant(Tensor::scalar(0.0));
    for &p in reg_params {
        let sq = g.square(p);
        let s = g.sum(sq);
        reg = g.add(reg, s)?;
    }

    let a = g.scale(clip, -1.0);
    let e = g.scale(entropy, -hyper.c_entropy);
    let vf = g.scale(value, hyper.c_vf);
    let r = g.scale(reg, hyper.c_reg);
    let t = g.add(a, e)?;
    let t = g.add(t, vf)?;
    let total = g.add(t, r)?;
    Ok(PpoTerms {
        clip,
        value,
        entropy,
        reg,
        total,
    })
}

/// `L^PPO + c_AE·L^AE`.
pub fn combined_loss(g: &mut Graph, ppo: Var, ae: Var, c_ae: f64) -> Result<Var> {
    let weighted = g.scale(ae, c_ae);
    g.add(ppo, weighted)
}
