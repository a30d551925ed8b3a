use std::borrow::Cow;
use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, PI};

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use super::expm::CMat;
use super::gates::{gate_matrix, taped, Gate, GateBackend, SpectralDisplacement, TapedGate};
use crate::error::{Error, Result};
use crate::grad::{CustomOp, Tensor};

/// Largest simulated Fock space, `cutoff^modes`.
pub const MAX_FOCK_DIM: usize = 1 << 16;

/// Squeezing magnitude and phase of the initial state.
pub const INITIAL_SQUEEZE: (f64, f64) = (0.5, FRAC_PI_2);

/// Truncated multi-mode Fock state. Index of `|n_0 … n_{M−1}⟩` is
/// `Σ n_j·c^{M−1−j}`, so mode 0 is the most significant digit.
#[derive(Clone, Debug, PartialEq)]
pub struct FockState {
    modes: usize,
    cutoff: usize,
    amps: Vec<C64>,
}

fn zero() -> C64 {
    C64::new(0.0, 0.0)
}

fn check_dims(modes: usize, cutoff: usize) -> Result<()> {
    if modes == 0 || cutoff < 2 {
        return Err(Error::Config(format!("need at least one mode and cutoff >= 2, got {modes} modes, cutoff {cutoff}")));
    }
    match cutoff.checked_pow(modes as u32) {
        Some(d) if d <= MAX_FOCK_DIM => Ok(()),
        _ => Err(Error::Config(format!(
            "Fock space {cutoff}^{modes} exceeds {MAX_FOCK_DIM} amplitudes"
        ))),
    }
}

impl FockState {
    pub fn vacuum(modes: usize, cutoff: usize) -> Result<Self> {
        check_dims(modes, cutoff)?;
        let mut amps = vec![zero(); cutoff.pow(modes as u32)];
        amps[0] = C64::new(1.0, 0.0);
        Ok(FockState { modes, cutoff, amps })
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amps
    }

    /// Retained probability `⟨ψ|ψ⟩`; below 1 when truncation leaked.
    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    fn stride(&self, mode: usize) -> usize {
        self.cutoff.pow((self.modes - 1 - mode) as u32)
    }

    fn digit(&self, idx: usize, mode: usize) -> usize {
        idx / self.stride(mode) % self.cutoff
    }

    /// Photon-number distribution of one mode (unnormalized).
    pub fn marginal(&self, mode: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.cutoff];
        for (i, a) in self.amps.iter().enumerate() {
            p[self.digit(i, mode)] += a.norm_sqr();
        }
        p
    }

    /// `⟨n_j⟩` of the renormalized state.
    pub fn mean_photon(&self, mode: usize) -> f64 {
        let p = self.marginal(mode);
        let z: f64 = p.iter().sum();
        p.iter().enumerate().map(|(n, v)| n as f64 * v).sum::<f64>() / z
    }

    /// `P_j ψ` with `P = i(a† − a)/√2` truncated to the cutoff.
    fn apply_p(&self, mode: usize) -> Vec<C64> {
        let s = self.stride(mode);
        let c = self.cutoff;
        let mut out = vec![zero(); self.amps.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let n = i / s % c;
            let mut v = zero();
            if n > 0 {
                v += self.amps[i - s] * (n as f64).sqrt();
            }
            if n + 1 < c {
                v -= self.amps[i + s] * ((n + 1) as f64).sqrt();
            }
            *o = v * C64::new(0.0, FRAC_1_SQRT_2);
        }
        out
    }

    /// `⟨P_j⟩` of the renormalized state.
    pub fn expectation_p(&self, mode: usize) -> f64 {
        let pp = self.apply_p(mode);
        let num: f64 = self.amps.iter().zip(&pp).map(|(a, b)| (a.conj() * b).re).sum();
        num / self.norm_sqr()
    }

    fn bases(&self, modes: &[usize]) -> impl Iterator<Item = usize> + '_ {
        let modes = modes.to_vec();
        (0..self.amps.len()).filter(move |&i| modes.iter().all(|&m| self.digit(i, m) == 0))
    }

    /// Applies a `cutoff×cutoff` matrix to one mode.
    pub fn apply_single(&mut self, mode: usize, g: &CMat) {
        let (s, c) = (self.stride(mode), self.cutoff);
        let mut v = vec![zero(); c];
        let bases: Vec<usize> = self.bases(&[mode]).collect();
        for base in bases {
            for (n, x) in v.iter_mut().enumerate() {
                *x = self.amps[base + n * s];
            }
            for r in 0..c {
                let mut acc = zero();
                for (k, x) in v.iter().enumerate() {
                    acc += g[(r, k)] * x;
                }
                self.amps[base + r * s] = acc;
            }
        }
    }

    /// Applies a `cutoff²×cutoff²` matrix (index `n_i·cutoff + n_j`) to modes `(i, j)`.
    pub fn apply_two(&mut self, i: usize, j: usize, g: &CMat) {
        let (si, sj, c) = (self.stride(i), self.stride(j), self.cutoff);
        let mut v = vec![zero(); c * c];
        let bases: Vec<usize> = self.bases(&[i, j]).collect();
        for base in bases {
            for a in 0..c {
                for b in 0..c {
                    v[a * c + b] = self.amps[base + a * si + b * sj];
                }
            }
            for a in 0..c {
                for b in 0..c {
                    let row = a * c + b;
                    let mut acc = zero();
                    for (k, x) in v.iter().enumerate() {
                        acc += g[(row, k)] * x;
                    }
                    self.amps[base + a * si + b * sj] = acc;
                }
            }
        }
    }

    fn apply_gate(&mut self, modes: (usize, Option<usize>), g: &CMat) {
        match modes {
            (i, Some(j)) => self.apply_two(i, j, g),
            (i, None) => self.apply_single(i, g),
        }
    }

    /// Gathers the amplitude vectors ("fibers") along the given modes.
    fn fibers(&self, modes: (usize, Option<usize>)) -> Vec<Vec<usize>> {
        let c = self.cutoff;
        match modes {
            (i, None) => {
                let s = self.stride(i);
                self.bases(&[i]).map(|b| (0..c).map(|n| b + n * s).collect()).collect()
            }
            (i, Some(j)) => {
                let (si, sj) = (self.stride(i), self.stride(j));
                self.bases(&[i, j])
                    .map(|b| (0..c * c).map(|k| b + (k / c) * si + (k % c) * sj).collect())
                    .collect()
            }
        }
    }
}

/// Product state from a single-mode amplitude vector.
fn product_state(modes: usize, cutoff: usize, single: &[C64]) -> FockState {
    let mut amps = vec![C64::new(1.0, 0.0)];
    for _ in 0..modes {
        amps = amps.iter().flat_map(|a| single.iter().map(move |s| a * s)).collect();
    }
    FockState { modes, cutoff, amps }
}

/// `S(1/2, π/2)^{⊗M}|0…0⟩`. Errors when the single-mode squeezed vacuum keeps
/// less than `1 − tolerance` of its probability inside the cutoff.
pub fn prepare_initial(modes: usize, cutoff: usize, tolerance: f64) -> Result<FockState> {
    check_dims(modes, cutoff)?;
    let (r, phi) = INITIAL_SQUEEZE;
    let s = gate_matrix(Gate::Squeeze { r, phi }, cutoff)?;
    let single: Vec<C64> = s.column(0).iter().copied().collect();
    let norm: f64 = single.iter().map(|a| a.norm_sqr()).sum();
    if norm < 1.0 - tolerance {
        return Err(Error::Truncation { norm, tolerance });
    }
    Ok(product_state(modes, cutoff, &single))
}

/// `sign(x)·(4/π)·|arctan x|^{1/3}`.
pub fn f_prep(x: f64) -> f64 {
    4.0 / PI * x.atan().cbrt()
}

fn f_prep_derivative(x: f64) -> f64 {
    let t = x.atan();
    if t == 0.0 {
        // The cube root has a vertical tangent at 0; no finite slope exists.
        return 0.0;
    }
    4.0 / (3.0 * PI) * t.abs().powf(-2.0 / 3.0) / (1.0 + x * x)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CvPrep {
    Identity,
    #[default]
    ArctanCbrt,
}

impl CvPrep {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            CvPrep::Identity => x,
            CvPrep::ArctanCbrt => f_prep(x),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            CvPrep::Identity => 1.0,
            CvPrep::ArctanCbrt => f_prep_derivative(x),
        }
    }
}

/// Applies `D(f_prep(z_j), π/2)` to mode `j`.
pub fn displacement_encode(state: &mut FockState, z: &[f64], prep: CvPrep) -> Result<()> {
    if z.len() > state.modes() {
        return Err(Error::Config(format!(
            "cannot encode {} features into {} modes",
            z.len(),
            state.modes()
        )));
    }
    for (j, &zj) in z.iter().enumerate() {
        let d = gate_matrix(
            Gate::Displace {
                r: prep.apply(zj),
                phi: FRAC_PI_2,
            },
            state.cutoff(),
        )?;
        state.apply_single(j, &d);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GradientMethod {
    /// Reverse mode through the gate construction.
    #[default]
    Exact,
    /// Central differences of the circuit output.
    FiniteDifference { step: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvPolicyConfig {
    pub modes: usize,
    pub layers: usize,
    pub cutoff: usize,
    #[serde(default)]
    pub reupload: bool,
    #[serde(default)]
    pub prep: CvPrep,
    pub n_actions: usize,
    /// A circuit whose output keeps less than `1 − trunc_tolerance` of the
    /// probability raises a truncation warning. Also bounds the initial state.
    #[serde(default = "default_trunc_tolerance")]
    pub trunc_tolerance: f64,
    #[serde(default)]
    pub gradient: GradientMethod,
    #[serde(default)]
    pub backend: GateBackend,
}

fn default_trunc_tolerance() -> f64 {
    1e-3
}

impl CvPolicyConfig {
    pub fn new(modes: usize, layers: usize, cutoff: usize, n_actions: usize) -> Self {
        CvPolicyConfig {
            modes,
            layers,
            cutoff,
            reupload: false,
            prep: CvPrep::ArctanCbrt,
            n_actions,
            trunc_tolerance: default_trunc_tolerance(),
            gradient: GradientMethod::Exact,
            backend: GateBackend::Spectral,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers * CvLayerParams::count(self.modes)
    }

    pub fn validate(&self, latent_dim: usize) -> Result<()> {
        check_dims(self.modes, self.cutoff)?;
        if latent_dim > self.modes {
            return Err(Error::Config(format!(
                "latent dimension {latent_dim} exceeds mode count {}",
                self.modes
            )));
        }
        if self.n_actions < 2 || self.n_actions > self.modes {
            return Err(Error::Config(format!(
                "n_actions {} must lie in 2..={}",
                self.n_actions, self.modes
            )));
        }
        if !(self.trunc_tolerance > 0.0 && self.trunc_tolerance < 1.0) {
            return Err(Error::Config(format!(
                "trunc_tolerance {} outside (0, 1)",
                self.trunc_tolerance
            )));
        }
        if let GradientMethod::FiniteDifference { step } = self.gradient {
            if !(step > 0.0 && step.is_finite()) {
                return Err(Error::Config(format!("finite-difference step {step} must be positive")));
            }
        }
        Ok(())
    }
}

/// Beamsplitter pairs of a rectangular interferometer mesh: `M` columns that
/// alternate between even and odd nearest-neighbour pairs, `M(M−1)/2` total.
pub fn mesh_pairs(modes: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for col in 0..modes {
        let mut i = col % 2;
        while i + 1 < modes {
            pairs.push((i, i + 1));
            i += 2;
        }
    }
    pairs
}

/// Trainable parameters of one CV layer. Flat layout per layer:
/// `[bs1 (θ,φ)…][squeeze (r,φ)…][bs2 (θ,φ)…][displace (r,φ)…][kerr κ…]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CvLayerParams {
    pub interferometer1: Vec<(f64, f64)>,
    pub squeeze: Vec<(f64, f64)>,
    pub interferometer2: Vec<(f64, f64)>,
    pub displace: Vec<(f64, f64)>,
    pub kerr: Vec<f64>,
}

impl CvLayerParams {
    /// `2·[M(M−1)/2]·2 + 2M + 2M + M`.
    pub fn count(modes: usize) -> usize {
        2 * modes * (modes - 1) + 5 * modes
    }

    pub fn flatten(layers: &[CvLayerParams]) -> Vec<f64> {
        let mut out = Vec::new();
        for l in layers {
            for &(a, b) in l.interferometer1.iter().chain(&l.squeeze).chain(&l.interferometer2).chain(&l.displace) {
                out.push(a);
                out.push(b);
            }
            out.extend(&l.kerr);
        }
        out
    }

    pub fn unflatten(flat: &[f64], modes: usize) -> Result<Vec<CvLayerParams>> {
        let per = CvLayerParams::count(modes);
        if modes == 0 || !flat.len().is_multiple_of(per) {
            return Err(Error::contract(
                "cv layers",
                format!("{} values is not a multiple of {per} per layer", flat.len()),
            ));
        }
        let pairs = modes * (modes - 1) / 2;
        Ok(flat
            .chunks(per)
            .map(|chunk| {
                let mut it = chunk.iter().copied();
                let mut take = |n: usize| -> Vec<(f64, f64)> {
                    (0..n).map(|_| (it.next().unwrap(), it.next().unwrap())).collect()
                };
                let interferometer1 = take(pairs);
                let squeeze = take(modes);
                let interferometer2 = take(pairs);
                let displace = take(modes);
                CvLayerParams {
                    interferometer1,
                    squeeze,
                    interferometer2,
                    displace,
                    kerr: chunk[per - modes..].to_vec(),
                }
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug)]
enum Step {
    Encode(usize),
    /// Index into the bound gate list.
    Gate(usize),
}

/// Placement of one trainable gate: kind, acted-on modes, first flat parameter.
#[derive(Clone, Copy, Debug)]
struct Slot {
    kind: SlotKind,
    modes: (usize, Option<usize>),
    param: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum SlotKind {
    Beamsplitter,
    Squeeze,
    Displace,
    Kerr,
}

/// Output of one circuit evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct CvOutput {
    /// `⟨P_j⟩` for every mode of the renormalized output state.
    pub expectations: Vec<f64>,
    /// Probability retained inside the truncated space.
    pub norm: f64,
}

/// A configured CV policy circuit with its cached initial state and encoder.
#[derive(Clone, Debug)]
pub struct CvCircuit {
    cfg: CvPolicyConfig,
    initial: FockState,
    encoder: SpectralDisplacement,
    slots: Vec<Slot>,
}

/// A circuit with gate matrices built for one parameter vector.
pub struct BoundCircuit<'a> {
    circuit: &'a CvCircuit,
    gates: Cow<'a, [TapedGate]>,
}

impl CvCircuit {
    pub fn new(cfg: CvPolicyConfig) -> Result<Self> {
        check_dims(cfg.modes, cfg.cutoff)?;
        let initial = prepare_initial(cfg.modes, cfg.cutoff, cfg.trunc_tolerance)?;
        let pairs = mesh_pairs(cfg.modes);
        let mut slots = Vec::new();
        let mut p = 0;
        for _ in 0..cfg.layers {
            let mut push = |kind, modes, width| {
                slots.push(Slot { kind, modes, param: p });
                p += width;
            };
            for &(i, j) in &pairs {
                push(SlotKind::Beamsplitter, (i, Some(j)), 2);
            }
            for m in 0..cfg.modes {
                push(SlotKind::Squeeze, (m, None), 2);
            }
            for &(i, j) in &pairs {
                push(SlotKind::Beamsplitter, (i, Some(j)), 2);
            }
            for m in 0..cfg.modes {
                push(SlotKind::Displace, (m, None), 2);
            }
            for m in 0..cfg.modes {
                push(SlotKind::Kerr, (m, None), 1);
            }
        }
        debug_assert_eq!(p, cfg.param_count());
        Ok(CvCircuit {
            encoder: SpectralDisplacement::new(cfg.cutoff),
            initial,
            slots,
            cfg,
        })
    }

    pub fn config(&self) -> &CvPolicyConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.cfg.param_count()
    }

    /// Builds every trainable gate matrix for `params`.
    pub fn bind(&self, params: &[f64]) -> Result<BoundCircuit<'_>> {
        if params.len() != self.param_count() {
            return Err(Error::contract(
                "cv policy",
                format!("expected {} parameters, got {}", self.param_count(), params.len()),
            ));
        }
        let gates: Vec<TapedGate> = self
            .slots
            .iter()
            .map(|s| {
                let p = &params[s.param..];
                let gate = match s.kind {
                    SlotKind::Beamsplitter => Gate::Beamsplitter { theta: p[0], phi: p[1] },
                    SlotKind::Squeeze => Gate::Squeeze { r: p[0], phi: p[1] },
                    SlotKind::Displace => Gate::Displace { r: p[0], phi: p[1] },
                    SlotKind::Kerr => Gate::Kerr { kappa: p[0] },
                };
                taped(gate, self.cfg.cutoff, self.cfg.backend)
            })
            .collect::<Result<_>>()?;
        Ok(BoundCircuit {
            circuit: self,
            gates: Cow::Owned(gates),
        })
    }

    fn program(&self, n_features: usize) -> Vec<Step> {
        let per_layer = self.slots.len() / self.cfg.layers.max(1);
        let mut steps = Vec::new();
        let encode = |steps: &mut Vec<Step>| steps.extend((0..n_features).map(Step::Encode));
        if self.cfg.layers == 0 {
            encode(&mut steps);
        }
        for l in 0..self.cfg.layers {
            if l == 0 || self.cfg.reupload {
                encode(&mut steps);
            }
            steps.extend((l * per_layer..(l + 1) * per_layer).map(Step::Gate));
        }
        steps
    }
}

/// `(∂L/∂ψ)` for `L = Σ_j u_j⟨P_j⟩` on the renormalized state:
/// `ψ̄ = (2/Z)·Σ_j u_j (P_jψ − ⟨P_j⟩ψ)`.
fn readout_adjoint(state: &FockState, expectations: &[f64], upstream: &[f64]) -> Vec<C64> {
    let z = state.norm_sqr();
    let mut bar = vec![zero(); state.amps.len()];
    for (j, (&u, &f)) in upstream.iter().zip(expectations).enumerate() {
        if u == 0.0 {
            continue;
        }
        let pp = state.apply_p(j);
        for ((b, p), a) in bar.iter_mut().zip(&pp).zip(&state.amps) {
            *b += (p - a * f) * (2.0 * u / z);
        }
    }
    bar
}

/// `Ḡ += Σ_fibers ψ̄_out ψ_inᴴ` and `ψ̄ ← Gᴴ ψ̄` along the gate's fibers.
fn gate_adjoint(input: &FockState, modes: (usize, Option<usize>), g: &CMat, bar: &mut [C64], gbar: Option<&mut CMat>) {
    let fibers = input.fibers(modes);
    let d = g.nrows();
    let mut gbar = gbar;
    let mut out = vec![zero(); d];
    for fiber in fibers {
        if let Some(gb) = gbar.as_deref_mut() {
            for (r, &ir) in fiber.iter().enumerate() {
                let br = bar[ir];
                if br == zero() {
                    continue;
                }
                for (k, &ik) in fiber.iter().enumerate() {
                    gb[(r, k)] += br * input.amps[ik].conj();
                }
            }
        }
        for (k, o) in out.iter_mut().enumerate() {
            let mut acc = zero();
            for (r, &ir) in fiber.iter().enumerate() {
                acc += g[(r, k)].conj() * bar[ir];
            }
            *o = acc;
        }
        for (k, &ik) in fiber.iter().enumerate() {
            bar[ik] = out[k];
        }
    }
}

impl BoundCircuit<'_> {
    fn check_z(&self, z: &[f64]) -> Result<()> {
        if z.len() > self.circuit.cfg.modes {
            return Err(Error::Config(format!(
                "cannot encode {} features into {} modes",
                z.len(),
                self.circuit.cfg.modes
            )));
        }
        Ok(())
    }

    fn run(&self, z: &[f64], steps: &[Step], mut record: Option<&mut Vec<FockState>>) -> FockState {
        let c = self.circuit;
        let mut state = c.initial.clone();
        for &step in steps {
            if let Some(r) = record.as_deref_mut() {
                r.push(state.clone());
            }
            match step {
                Step::Encode(j) => state.apply_single(j, &c.encoder.matrix(c.cfg.prep.apply(z[j]))),
                Step::Gate(k) => state.apply_gate(c.slots[k].modes, &self.gates[k].matrix),
            }
        }
        state
    }

    pub fn evaluate(&self, z: &[f64]) -> Result<CvOutput> {
        self.check_z(z)?;
        let steps = self.circuit.program(z.len());
        let state = self.run(z, &steps, None);
        let expectations = (0..state.modes()).map(|j| state.expectation_p(j)).collect();
        Ok(CvOutput {
            expectations,
            norm: state.norm_sqr(),
        })
    }

    /// Accumulates `∂L/∂G` for every bound gate into `gbars` and returns
    /// `∂L/∂z` for `L = Σ_j upstream_j·⟨P_j⟩`.
    fn backward_sample(&self, z: &[f64], upstream: &[f64], gbars: &mut [CMat]) -> Result<Vec<f64>> {
        self.check_z(z)?;
        let c = self.circuit;
        let steps = c.program(z.len());
        let mut states = Vec::with_capacity(steps.len());
        let out = self.run(z, &steps, Some(&mut states));
        let expectations: Vec<f64> = (0..out.modes()).map(|j| out.expectation_p(j)).collect();
        let mut bar = readout_adjoint(&out, &expectations, upstream);
        let mut gz = vec![0.0; z.len()];
        for (step, input) in steps.iter().zip(&states).rev() {
            match *step {
                Step::Encode(j) => {
                    let d = c.cfg.prep.apply(z[j]);
                    let mut gb = CMat::zeros(c.cfg.cutoff, c.cfg.cutoff);
                    let (m, dm) = c.encoder.matrix_and_derivative(d);
                    gate_adjoint(input, (j, None), &m, &mut bar, Some(&mut gb));
                    let dd = super::expm::real_inner(&gb, &dm);
                    gz[j] += dd * c.cfg.prep.derivative(z[j]);
                }
                Step::Gate(k) => {
                    gate_adjoint(input, c.slots[k].modes, &self.gates[k].matrix, &mut bar, Some(&mut gbars[k]));
                }
            }
        }
        Ok(gz)
    }

    /// Exact gradients summed over a batch: `(∂L/∂params, ∂L/∂z per sample)`.
    fn backward_batch(&self, zs: &[&[f64]], upstream: &[&[f64]]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let mut gbars: Vec<CMat> = self
            .gates
            .iter()
            .map(|g| CMat::zeros(g.matrix.nrows(), g.matrix.ncols()))
            .collect();
        let mut gz = Vec::with_capacity(zs.len());
        for (z, u) in zs.iter().zip(upstream) {
            gz.push(self.backward_sample(z, u, &mut gbars)?);
        }
        let mut gp = vec![0.0; self.circuit.param_count()];
        for ((slot, gate), gbar) in self.circuit.slots.iter().zip(self.gates.iter()).zip(&gbars) {
            let [a, b] = gate.param_grads(gbar);
            gp[slot.param] += a;
            if slot.kind != SlotKind::Kerr {
                gp[slot.param + 1] += b;
            }
        }
        Ok((gp, gz))
    }
}

fn weighted_readout(circuit: &CvCircuit, params: &[f64], zs: &[&[f64]], upstream: &[&[f64]]) -> Result<f64> {
    let bound = circuit.bind(params)?;
    let mut total = 0.0;
    for (z, u) in zs.iter().zip(upstream) {
        let out = bound.evaluate(z)?;
        total += out.expectations.iter().zip(u.iter()).map(|(e, w)| e * w).sum::<f64>();
    }
    Ok(total)
}

fn finite_difference_batch(
    circuit: &CvCircuit,
    params: &[f64],
    zs: &[&[f64]],
    upstream: &[&[f64]],
    step: f64,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut probe = params.to_vec();
    let mut gp = vec![0.0; params.len()];
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let fp = weighted_readout(circuit, &probe, zs, upstream)?;
        probe[i] = params[i] - step;
        let fm = weighted_readout(circuit, &probe, zs, upstream)?;
        probe[i] = params[i];
        gp[i] = (fp - fm) / (2.0 * step);
    }
    let bound = circuit.bind(params)?;
    let mut gz = Vec::with_capacity(zs.len());
    for (z, u) in zs.iter().zip(upstream) {
        let f = |zz: &[f64]| -> Result<f64> {
            let out = bound.evaluate(zz)?;
            Ok(out.expectations.iter().zip(u.iter()).map(|(e, w)| e * w).sum())
        };
        let mut zp = z.to_vec();
        let mut g = vec![0.0; z.len()];
        for j in 0..z.len() {
            zp[j] = z[j] + step;
            let fp = f(&zp)?;
            zp[j] = z[j] - step;
            let fm = f(&zp)?;
            zp[j] = z[j];
            g[j] = (fp - fm) / (2.0 * step);
        }
        gz.push(g);
    }
    Ok((gp, gz))
}

/// `bound` may carry gates already built for `params`.
fn batch_gradients(
    circuit: &CvCircuit,
    params: &[f64],
    bound: Option<&[TapedGate]>,
    zs: &[&[f64]],
    upstream: &[&[f64]],
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    match circuit.cfg.gradient {
        GradientMethod::Exact => match bound {
            Some(gates) => BoundCircuit {
                circuit,
                gates: Cow::Borrowed(gates),
            }
            .backward_batch(zs, upstream),
            None => circuit.bind(params)?.backward_batch(zs, upstream),
        },
        GradientMethod::FiniteDifference { step } => finite_difference_batch(circuit, params, zs, upstream, step),
    }
}

/// Evaluates the policy circuit on one latent vector.
pub fn run_cv_policy(z: &[f64], layers: &[CvLayerParams], cfg: &CvPolicyConfig) -> Result<CvOutput> {
    cfg.validate(z.len())?;
    check_layers(layers, cfg)?;
    let circuit = CvCircuit::new(cfg.clone())?;
    circuit.bind(&CvLayerParams::flatten(layers))?.evaluate(z)
}

fn check_layers(layers: &[CvLayerParams], cfg: &CvPolicyConfig) -> Result<()> {
    let pairs = cfg.modes * (cfg.modes - 1) / 2;
    let ok = layers.len() == cfg.layers
        && layers.iter().all(|l| {
            l.interferometer1.len() == pairs
                && l.interferometer2.len() == pairs
                && l.squeeze.len() == cfg.modes
                && l.displace.len() == cfg.modes
                && l.kerr.len() == cfg.modes
        });
    if ok {
        Ok(())
    } else {
        Err(Error::contract(
            "cv policy",
            format!("layer parameters do not match {} layers of {} modes", cfg.layers, cfg.modes),
        ))
    }
}

/// Softmax over the first `n_actions` quadrature expectations.
pub fn cv_action_distribution(expectations: &[f64], n_actions: usize) -> Result<Vec<f64>> {
    crate::qubit::action_distribution(expectations, n_actions)
}

/// `(∂L/∂params, ∂L/∂z)` for `L = Σ_j upstream_j·⟨P_j⟩`, parameters in
/// [`CvLayerParams::flatten`] order, using the configured gradient method.
pub fn cv_policy_gradients(
    z: &[f64],
    layers: &[CvLayerParams],
    cfg: &CvPolicyConfig,
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    cfg.validate(z.len())?;
    check_layers(layers, cfg)?;
    if upstream.len() != cfg.modes {
        return Err(Error::contract(
            "cv_policy_gradients",
            format!("upstream has {} entries for {} modes", upstream.len(), cfg.modes),
        ));
    }
    let circuit = CvCircuit::new(cfg.clone())?;
    let (gp, mut gz) = batch_gradients(&circuit, &CvLayerParams::flatten(layers), None, &[z], &[upstream])?;
    Ok((gp, gz.pop().unwrap_or_default()))
}

/// Batched CV policy as a graph op: inputs `z: [B, d]` and flat parameters,
/// output `[B, M]` quadrature expectations.
pub struct CvPolicyOp {
    circuit: std::sync::Arc<CvCircuit>,
    /// Parameters and gates from the last forward pass.
    bound: Option<(Vec<f64>, Vec<TapedGate>)>,
}

impl CvPolicyOp {
    pub fn new(circuit: std::sync::Arc<CvCircuit>) -> Self {
        CvPolicyOp { circuit, bound: None }
    }
}

fn rows(t: &Tensor) -> Result<Vec<&[f64]>> {
    match t.shape() {
        [b, _] => Ok((0..*b).map(|r| t.row(r)).collect()),
        s => Err(Error::contract("cv_policy", format!("batch must be rank 2, got {:?}", s))),
    }
}

impl CustomOp for CvPolicyOp {
    fn name(&self) -> &'static str {
        "cv_policy"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let [z, params] = inputs else {
            return Err(Error::contract("cv_policy", "expects (z, params)"));
        };
        let zs = rows(z)?;
        let bound = self.circuit.bind(params.data())?;
        let mut out = Vec::with_capacity(zs.len() * self.circuit.cfg.modes);
        for r in &zs {
            out.extend(bound.evaluate(r)?.expectations);
        }
        let gates = bound.gates.into_owned();
        self.bound = Some((params.data().to_vec(), gates));
        Tensor::new(vec![zs.len(), self.circuit.cfg.modes], out)
    }

    fn backward(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let [z, params] = inputs else {
            return Err(Error::contract("cv_policy", "expects (z, params)"));
        };
        let zs = rows(z)?;
        let us = rows(upstream)?;
        let cached = match &self.bound {
            Some((p, gates)) if p.as_slice() == params.data() => Some(gates.as_slice()),
            _ => None,
        };
        let (gp, gz) = batch_gradients(&self.circuit, params.data(), cached, &zs, &us)?;
        Ok(vec![
            Tensor::new(z.shape().to_vec(), gz.concat())?,
            Tensor::new(params.shape().to_vec(), gp)?,
        ])
    }
}
