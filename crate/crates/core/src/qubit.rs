//! Qubit state-vector simulator and the strongly entangling policy circuit.
//!
//! The circuit starts from `|0…0⟩`, angle-embeds the latent vector with
//! `R_Y(f_prep(z_j))` on qubit `j`, and applies `L` trainable layers. A layer
//! is a general rotation `R(α,β,γ) = R_Z(γ)·R_Y(β)·R_Z(α)` on every qubit
//! followed by a CNOT ring `i → (i + offset) mod M`. With re-uploading the
//! embedding is repeated in front of every layer. The readout is `⟨Z_j⟩` for
//! every qubit, and actions are drawn from `softmax(⟨Z_0⟩ … ⟨Z_{n−1}⟩)`.
//!
//! Gradients with respect to both gate angles and embedded features use the
//! adjoint method: one forward sweep, then one backward sweep that un-applies
//! gates to the state and to the co-state simultaneously.
//!
//! Qubit `q` is bit `q` of the amplitude index.

use std::f64::consts::PI;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{CustomOp, Tensor};

pub const MAX_QUBITS: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct QubitState {
    n_qubits: usize,
    amps: Vec<C64>,
}

impl QubitState {
    /// `|0…0⟩` on `n_qubits` qubits.
    pub fn zero(n_qubits: usize) -> Result<Self> {
        if n_qubits == 0 || n_qubits > MAX_QUBITS {
            return Err(Error::Config(format!(
                "qubit count {n_qubits} outside 1..={MAX_QUBITS}"
            )));
        }
        let mut amps = vec![C64::new(0.0, 0.0); 1 << n_qubits];
        amps[0] = C64::new(1.0, 0.0);
        Ok(QubitState { n_qubits, amps })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    fn apply_1q(&mut self, q: usize, m: [[C64; 2]; 2]) {
        let bit = 1usize << q;
        for i in 0..self.amps.len() {
            if i & bit == 0 {
                let (a, b) = (self.amps[i], self.amps[i | bit]);
                self.amps[i] = m[0][0] * a + m[0][1] * b;
                self.amps[i | bit] = m[1][0] * a + m[1][1] * b;
            }
        }
    }

    pub fn apply_ry(&mut self, q: usize, theta: f64) {
        let (s, c) = (theta / 2.0).sin_cos();
        let (c, s) = (C64::new(c, 0.0), C64::new(s, 0.0));
        self.apply_1q(q, [[c, -s], [s, c]]);
    }

    pub fn apply_rz(&mut self, q: usize, theta: f64) {
        let z = C64::new(0.0, 0.0);
        self.apply_1q(q, [[C64::from_polar(1.0, -theta / 2.0), z], [z, C64::from_polar(1.0, theta / 2.0)]]);
    }

    /// `R(α,β,γ) = R_Z(γ)·R_Y(β)·R_Z(α)`.
    pub fn apply_rot(&mut self, q: usize, alpha: f64, beta: f64, gamma: f64) {
        self.apply_rz(q, alpha);
        self.apply_ry(q, beta);
        self.apply_rz(q, gamma);
    }

    pub fn apply_cnot(&mut self, control: usize, target: usize) {
        let (cb, tb) = (1usize << control, 1usize << target);
        for i in 0..self.amps.len() {
            if i & cb != 0 && i & tb == 0 {
                self.amps.swap(i, i | tb);
            }
        }
    }

    pub fn expectation_z(&self, q: usize) -> f64 {
        let bit = 1usize << q;
        self.amps
            .iter()
            .enumerate()
            .map(|(i, a)| if i & bit == 0 { a.norm_sqr() } else { -a.norm_sqr() })
            .sum()
    }

    pub fn expectations_z(&self) -> Vec<f64> {
        (0..self.n_qubits).map(|q| self.expectation_z(q)).collect()
    }

    fn apply_pauli(&mut self, q: usize, axis: Axis) {
        let bit = 1usize << q;
        for i in 0..self.amps.len() {
            if i & bit == 0 {
                let (a, b) = (self.amps[i], self.amps[i | bit]);
                match axis {
                    Axis::Y => {
                        self.amps[i] = C64::new(0.0, -1.0) * b;
                        self.amps[i | bit] = C64::new(0.0, 1.0) * a;
                    }
                    Axis::Z => self.amps[i | bit] = -b,
                }
            }
        }
    }

    fn inner(&self, other: &QubitState) -> C64 {
        self.amps.iter().zip(&other.amps).map(|(a, b)| a.conj() * b).sum()
    }
}

/// Preprocessing applied to latent features before angle embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QubitPrep {
    Identity,
    /// `θ = π·z`, mapping sigmoid-range latents onto `(0, π)`.
    #[default]
    Pi,
}

impl QubitPrep {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            QubitPrep::Identity => z,
            QubitPrep::Pi => PI * z,
        }
    }

    pub fn derivative(self) -> f64 {
        match self {
            QubitPrep::Identity => 1.0,
            QubitPrep::Pi => PI,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QubitPolicyConfig {
    pub qubits: usize,
    pub layers: usize,
    #[serde(default)]
    pub reupload: bool,
    #[serde(default)]
    pub prep: QubitPrep,
    pub n_actions: usize,
    /// Rotation-set + CNOT-ring blocks per layer. Each block consumes `3·M`
    /// parameters; consecutive blocks use ring offsets 1, 2, ….
    #[serde(default = "one")]
    pub blocks_per_layer: usize,
}

fn one() -> usize {
    1
}

impl QubitPolicyConfig {
    pub fn new(qubits: usize, layers: usize, n_actions: usize) -> Self {
        QubitPolicyConfig {
            qubits,
            layers,
            reupload: false,
            prep: QubitPrep::Pi,
            n_actions,
            blocks_per_layer: 1,
        }
    }

    pub fn param_count(&self) -> usize {
        3 * self.qubits * self.layers * self.blocks_per_layer
    }

    pub fn validate(&self, latent_dim: usize) -> Result<()> {
        if self.qubits == 0 || self.qubits > MAX_QUBITS {
            return Err(Error::Config(format!("qubit count {} outside 1..={MAX_QUBITS}", self.qubits)));
        }
        if latent_dim > self.qubits {
            return Err(Error::Config(format!(
                "latent dimension {latent_dim} exceeds qubit count {}",
                self.qubits
            )));
        }
        if self.n_actions < 2 || self.n_actions > self.qubits {
            return Err(Error::Config(format!(
                "n_actions {} must lie in 2..={}",
                self.n_actions, self.qubits
            )));
        }
        if self.blocks_per_layer == 0 {
            return Err(Error::Config("blocks_per_layer must be at least 1".into()));
        }
        Ok(())
    }

    /// CNOT ring offset for the `block`-th rotation block overall.
    fn ring_offset(&self, block: usize) -> Option<usize> {
        (self.qubits > 1).then(|| block % (self.qubits - 1) + 1)
    }
}

#[derive(Clone, Copy, Debug)]
enum Axis {
    Y,
    Z,
}

#[derive(Clone, Copy, Debug)]
enum Angle {
    Param(usize),
    Feature(usize),
}

#[derive(Clone, Copy, Debug)]
enum Gate {
    Rot { q: usize, axis: Axis, angle: Angle },
    Cnot { control: usize, target: usize },
}

fn embedding(gates: &mut Vec<Gate>, n_features: usize) {
    for j in 0..n_features {
        gates.push(Gate::Rot {
            q: j,
            axis: Axis::Y,
            angle: Angle::Feature(j),
        });
    }
}

/// Flat gate list for the configured circuit. Parameters are laid out as
/// `[layer][block][qubit][α, β, γ]`.
fn program(cfg: &QubitPolicyConfig, n_features: usize) -> Vec<Gate> {
    let m = cfg.qubits;
    let mut gates = Vec::new();
    let mut p = 0;
    for layer in 0..cfg.layers {
        if layer == 0 || cfg.reupload {
            embedding(&mut gates, n_features);
        }
        for b in 0..cfg.blocks_per_layer {
            for q in 0..m {
                for axis in [Axis::Z, Axis::Y, Axis::Z] {
                    gates.push(Gate::Rot {
                        q,
                        axis,
                        angle: Angle::Param(p),
                    });
                    p += 1;
                }
            }
            if let Some(offset) = cfg.ring_offset(layer * cfg.blocks_per_layer + b) {
                for i in 0..m {
                    let t = (i + offset) % m;
                    if t != i {
                        gates.push(Gate::Cnot { control: i, target: t });
                    }
                }
            }
        }
    }
    if cfg.layers == 0 {
        embedding(&mut gates, n_features);
    }
    gates
}

/// Gate list with the half-angle `(cos, sin)` of every trainable rotation
/// precomputed, shared across a batch.
struct Compiled {
    gates: Vec<Gate>,
    param_cs: Vec<(f64, f64)>,
}

impl Compiled {
    fn new(cfg: &QubitPolicyConfig, params: &[f64], n_features: usize) -> Self {
        Compiled {
            gates: program(cfg, n_features),
            param_cs: params.iter().map(|p| half_angle(*p)).collect(),
        }
    }

    fn feature_cs(z: &[f64], prep: QubitPrep) -> Vec<(f64, f64)> {
        z.iter().map(|&v| half_angle(prep.apply(v))).collect()
    }

    fn cs(&self, angle: Angle, feature_cs: &[(f64, f64)]) -> (f64, f64) {
        match angle {
            Angle::Param(i) => self.param_cs[i],
            Angle::Feature(j) => feature_cs[j],
        }
    }
}

fn half_angle(theta: f64) -> (f64, f64) {
    let (s, c) = (theta / 2.0).sin_cos();
    (c, s)
}

/// Applies a gate given the half-angle cosine and sine of its rotation.
fn apply_gate(state: &mut QubitState, gate: Gate, (c, s): (f64, f64)) {
    match gate {
        Gate::Rot { q, axis: Axis::Y, .. } => {
            let (c, s) = (C64::new(c, 0.0), C64::new(s, 0.0));
            state.apply_1q(q, [[c, -s], [s, c]]);
        }
        Gate::Rot { q, axis: Axis::Z, .. } => {
            let z = C64::new(0.0, 0.0);
            state.apply_1q(q, [[C64::new(c, -s), z], [z, C64::new(c, s)]]);
        }
        Gate::Cnot { control, target } => state.apply_cnot(control, target),
    }
}

fn check_inputs(z: &[f64], params: &[f64], cfg: &QubitPolicyConfig) -> Result<()> {
    cfg.validate(z.len())?;
    if params.len() != cfg.param_count() {
        return Err(Error::contract(
            "qubit policy",
            format!("expected {} parameters, got {}", cfg.param_count(), params.len()),
        ));
    }
    Ok(())
}

/// Applies `R_Y(f_prep(z_j))` to qubit `j` for each latent component.
pub fn angle_embed(state: &mut QubitState, z: &[f64], prep: QubitPrep) -> Result<()> {
    if z.len() > state.n_qubits() {
        return Err(Error::Config(format!(
            "cannot embed {} features into {} qubits",
            z.len(),
            state.n_qubits()
        )));
    }
    for (j, &zj) in z.iter().enumerate() {
        state.apply_ry(j, prep.apply(zj));
    }
    Ok(())
}

/// One rotation set (`params` is `M×3`, row-major `[α, β, γ]`) followed by a
/// CNOT ring with the given offset.
pub fn entangling_layer(state: &mut QubitState, params: &[f64], ring_offset: usize) -> Result<()> {
    let m = state.n_qubits();
    if params.len() != 3 * m {
        return Err(Error::contract(
            "entangling_layer",
            format!("expected {}x3 angles, got {}", m, params.len()),
        ));
    }
    for q in 0..m {
        state.apply_rot(q, params[3 * q], params[3 * q + 1], params[3 * q + 2]);
    }
    for i in 0..m {
        let t = (i + ring_offset) % m;
        if t != i {
            state.apply_cnot(i, t);
        }
    }
    Ok(())
}

fn final_state(z: &[f64], cfg: &QubitPolicyConfig, compiled: &Compiled) -> Result<QubitState> {
    let fcs = Compiled::feature_cs(z, cfg.prep);
    let mut state = QubitState::zero(cfg.qubits)?;
    for &g in &compiled.gates {
        let cs = match g {
            Gate::Rot { angle, .. } => compiled.cs(angle, &fcs),
            Gate::Cnot { .. } => (1.0, 0.0),
        };
        apply_gate(&mut state, g, cs);
    }
    Ok(state)
}

/// `⟨Z_1⟩ … ⟨Z_M⟩` of the policy circuit at latent `z`.
pub fn run_policy(z: &[f64], params: &[f64], cfg: &QubitPolicyConfig) -> Result<Vec<f64>> {
    check_inputs(z, params, cfg)?;
    Ok(final_state(z, cfg, &Compiled::new(cfg, params, z.len()))?.expectations_z())
}

/// `Pr(a=j) = exp⟨Z_j⟩ / Σ_{k<n_actions} exp⟨Z_k⟩` over the first `n_actions` qubits.
pub fn action_distribution(expectations: &[f64], n_actions: usize) -> Result<Vec<f64>> {
    if n_actions == 0 || n_actions > expectations.len() {
        return Err(Error::Config(format!(
            "n_actions {} exceeds {} readouts",
            n_actions,
            expectations.len()
        )));
    }
    Ok(softmax(&expectations[..n_actions]))
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Exact `(∂L/∂params, ∂L/∂z)` for `L = Σ_j upstream_j·⟨Z_j⟩` by adjoint
/// differentiation.
pub fn policy_gradients(
    z: &[f64],
    params: &[f64],
    cfg: &QubitPolicyConfig,
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_inputs(z, params, cfg)?;
    if upstream.len() != cfg.qubits {
        return Err(Error::contract(
            "policy_gradients",
            format!("upstream has {} entries for {} qubits", upstream.len(), cfg.qubits),
        ));
    }
    let compiled = Compiled::new(cfg, params, z.len());
    gradients(z, cfg, &compiled, upstream)
}

fn gradients(
    z: &[f64],
    cfg: &QubitPolicyConfig,
    compiled: &Compiled,
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let fcs = Compiled::feature_cs(z, cfg.prep);
    let mut psi = final_state(z, cfg, compiled)?;

    // Co-state λ = O·ψ with O = Σ_j u_j Z_j (diagonal).
    let mut lam = psi.clone();
    for (i, a) in lam.amps.iter_mut().enumerate() {
        let w: f64 = upstream
            .iter()
            .enumerate()
            .map(|(q, u)| if i >> q & 1 == 0 { *u } else { -*u })
            .sum();
        *a *= w;
    }

    let mut g_params = vec![0.0; compiled.param_cs.len()];
    let mut g_z = vec![0.0; z.len()];
    let mut scratch = psi.clone();
    for &g in compiled.gates.iter().rev() {
        match g {
            Gate::Rot { q, axis, angle } => {
                // d/dθ exp(−iθP/2) contributes Im⟨λ|P|ψ⟩ with ψ the post-gate state.
                scratch.amps.copy_from_slice(&psi.amps);
                scratch.apply_pauli(q, axis);
                let d = lam.inner(&scratch).im;
                match angle {
                    Angle::Param(i) => g_params[i] += d,
                    Angle::Feature(j) => g_z[j] += d * cfg.prep.derivative(),
                }
                let (c, s) = compiled.cs(angle, &fcs);
                apply_gate(&mut psi, g, (c, -s));
                apply_gate(&mut lam, g, (c, -s));
            }
            Gate::Cnot { .. } => {
                apply_gate(&mut psi, g, (1.0, 0.0));
                apply_gate(&mut lam, g, (1.0, 0.0));
            }
        }
    }
    Ok((g_params, g_z))
}

/// Batched policy circuit as a graph op: inputs `z: [B, d]` and
/// `params: [3·M·L·blocks]`, output `[B, M]` expectations.
pub struct QubitPolicyOp {
    cfg: QubitPolicyConfig,
}

impl QubitPolicyOp {
    pub fn new(cfg: QubitPolicyConfig) -> Self {
        QubitPolicyOp { cfg }
    }
}

fn batch_dims(op: &'static str, z: &Tensor) -> Result<(usize, usize)> {
    match z.shape() {
        [b, d] => Ok((*b, *d)),
        s => Err(Error::contract(op, format!("latent batch must be rank 2, got {:?}", s))),
    }
}

impl CustomOp for QubitPolicyOp {
    fn name(&self) -> &'static str {
        "qubit_policy"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let [z, params] = inputs else {
            return Err(Error::contract("qubit_policy", "expects (z, params)"));
        };
        let (b, d) = batch_dims("qubit_policy", z)?;
        check_inputs(&vec![0.0; d], params.data(), &self.cfg)?;
        let compiled = Compiled::new(&self.cfg, params.data(), d);
        let mut out = Vec::with_capacity(b * self.cfg.qubits);
        for r in 0..b {
            out.extend(final_state(z.row(r), &self.cfg, &compiled)?.expectations_z());
        }
        Tensor::new(vec![b, self.cfg.qubits], out)
    }

    fn backward(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let [z, params] = inputs else {
            return Err(Error::contract("qubit_policy", "expects (z, params)"));
        };
        let (b, d) = batch_dims("qubit_policy", z)?;
        let mut gz = vec![0.0; b * d];
        let mut gp = vec![0.0; params.len()];
        if upstream.shape() != [b, self.cfg.qubits] {
            return Err(Error::contract("qubit_policy", format!("upstream shape {:?}", upstream.shape())));
        }
        let compiled = Compiled::new(&self.cfg, params.data(), d);
        for r in 0..b {
            let (p, zz) = gradients(z.row(r), &self.cfg, &compiled, upstream.row(r))?;
            for (a, v) in gp.iter_mut().zip(p) {
                *a += v;
            }
            gz[r * d..(r + 1) * d].copy_from_slice(&zz);
        }
        Ok(vec![Tensor::new(z.shape().to_vec(), gz)?, Tensor::new(params.shape().to_vec(), gp)?])
    }
}
