//! Fock-basis gate matrices.
//!
//! Single-mode Gaussian gates exponentiate their generator in a padded space
//! of dimension [`padded_dim`] and keep the top-left `cutoff×cutoff` block, so
//! matrix elements inside the cutoff are accurate and probability that would
//! leave the truncated space is lost rather than reflected back. Beamsplitters
//! conserve total photon number and are exponentiated exactly per
//! photon-number block. Rotation and Kerr gates are diagonal.
//!
//! Both [`GateBackend`]s exponentiate the same generators and agree to
//! rounding; the Taylor one is kept as the reference.

use std::collections::HashMap;
use std::f64::consts::FRAC_PI_2;
use std::sync::{Arc, OnceLock, PoisonError, RwLock};

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use super::expm::{expm_backward, expm_taped, real_inner, CMat, ExpmTape};
use crate::error::{Error, Result};

/// Working dimension for single-mode generators at the given cutoff.
pub fn padded_dim(cutoff: usize) -> usize {
    2 * cutoff + 20
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gate {
    /// `S(z) = exp(½(z*a² − z a†²))`, `z = r·e^{iφ}`.
    Squeeze { r: f64, phi: f64 },
    /// `D(α) = exp(α a† − α* a)`, `α = r·e^{iφ}`.
    Displace { r: f64, phi: f64 },
    /// `R(φ) = exp(iφ a†a)`.
    Rotation { phi: f64 },
    /// `K(κ) = exp(iκ (a†a)²)`.
    Kerr { kappa: f64 },
    /// `BS(θ,φ) = exp(θ(e^{iφ} a†b − e^{−iφ} a b†))` on an ordered mode pair.
    Beamsplitter { theta: f64, phi: f64 },
}

impl Gate {
    pub fn is_two_mode(&self) -> bool {
        matches!(self, Gate::Beamsplitter { .. })
    }

    fn params(&self) -> [f64; 2] {
        match *self {
            Gate::Squeeze { r, phi } | Gate::Displace { r, phi } => [r, phi],
            Gate::Rotation { phi } => [phi, 0.0],
            Gate::Kerr { kappa } => [kappa, 0.0],
            Gate::Beamsplitter { theta, phi } => [theta, phi],
        }
    }
}

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Annihilation operator on `dim` Fock levels.
pub fn annihilation(dim: usize) -> CMat {
    CMat::from_fn(dim, dim, |i, j| if j == i + 1 { c((j as f64).sqrt(), 0.0) } else { c(0.0, 0.0) })
}

/// Generator and its derivatives with respect to the two gate parameters.
fn single_mode_generator(gate: Gate, dim: usize) -> (CMat, CMat, CMat) {
    let a = annihilation(dim);
    let ad = a.adjoint();
    match gate {
        Gate::Squeeze { r, phi } => {
            let a2 = &a * &a;
            let ad2 = &ad * &ad;
            let em = C64::from_polar(1.0, -phi);
            let ep = C64::from_polar(1.0, phi);
            let x = (&a2 * em - &ad2 * ep) * c(0.5 * r, 0.0);
            let dr = (&a2 * em - &ad2 * ep) * c(0.5, 0.0);
            let dphi = (&a2 * em + &ad2 * ep) * c(0.0, -0.5 * r);
            (x, dr, dphi)
        }
        Gate::Displace { r, phi } => {
            let ep = C64::from_polar(1.0, phi);
            let em = ep.conj();
            let x = (&ad * ep - &a * em) * c(r, 0.0);
            let dr = &ad * ep - &a * em;
            let dphi = (&ad * ep + &a * em) * c(0.0, r);
            (x, dr, dphi)
        }
        _ => unreachable!("not a padded single-mode gate"),
    }
}

/// `a†b` restricted to the block with `N` total photons; basis index is `n_a`.
fn hop_block(n: usize) -> CMat {
    CMat::from_fn(n + 1, n + 1, |i, j| {
        if i == j + 1 {
            c(((j + 1) as f64 * (n - j) as f64).sqrt(), 0.0)
        } else {
            c(0.0, 0.0)
        }
    })
}

fn beamsplitter_generator(theta: f64, phi: f64, n: usize) -> (CMat, CMat, CMat) {
    let h = hop_block(n);
    let ht = h.transpose();
    let ep = C64::from_polar(1.0, phi);
    let em = ep.conj();
    let dtheta = &h * ep - &ht * em;
    let x = &dtheta * c(theta, 0.0);
    let dphi = (&h * ep + &ht * em) * c(0.0, theta);
    (x, dtheta, dphi)
}

/// Range of `n_a` in block `N` with both occupation numbers below the cutoff.
fn block_window(n: usize, cutoff: usize) -> std::ops::RangeInclusive<usize> {
    n.saturating_sub(cutoff - 1)..=n.min(cutoff - 1)
}

/// How single-mode Gaussian and beamsplitter gates are exponentiated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateBackend {
    /// Each generator is a phase rotation of a real symmetric one whose
    /// eigendecomposition is computed once per cutoff; the gate and its
    /// parameter derivatives follow in closed form.
    #[default]
    Spectral,
    /// Scaling-and-squaring Taylor exponential of the generator, reversed
    /// through the recorded steps.
    Taylor,
}

/// Eigendecomposition of a real symmetric generator `H`, split into the
/// sectors it leaves invariant so that forbidden matrix elements stay exactly
/// zero.
#[derive(Debug)]
struct Spectrum {
    sectors: Vec<Sector>,
}

#[derive(Debug)]
struct Sector {
    /// Basis levels spanned by the sector, ascending.
    levels: Vec<usize>,
    vecs: DMatrix<f64>,
    vals: Vec<f64>,
}

impl Spectrum {
    /// `H` on `dim` levels with its only nonzero entries `h(i)` at
    /// `(i, i + offset)` and `(i + offset, i)`; levels are grouped by
    /// residue mod `offset`.
    fn banded(dim: usize, offset: usize, h: impl Fn(usize) -> f64) -> Self {
        let sectors = (0..offset.min(dim))
            .map(|r| {
                let levels: Vec<usize> = (r..dim).step_by(offset).collect();
                let n = levels.len();
                let m = DMatrix::from_fn(n, n, |i, j| {
                    if j == i + 1 {
                        h(levels[i])
                    } else if i == j + 1 {
                        h(levels[j])
                    } else {
                        0.0
                    }
                });
                let eig = SymmetricEigen::new(m);
                Sector {
                    levels,
                    vecs: eig.eigenvectors,
                    vals: eig.eigenvalues.iter().copied().collect(),
                }
            })
            .collect();
        Spectrum { sectors }
    }

    /// Leading `dim×dim` block of `exp(itH)` and of its derivative in `t`.
    fn exp(&self, t: f64, dim: usize) -> (CMat, CMat) {
        let mut m = CMat::zeros(dim, dim);
        let mut dm = CMat::zeros(dim, dim);
        for sec in &self.sectors {
            let w: Vec<C64> = sec.vals.iter().map(|&l| C64::from_polar(1.0, t * l)).collect();
            let inside = sec.levels.iter().take_while(|&&l| l < dim).count();
            for j in 0..inside {
                for i in 0..inside {
                    let (mut s, mut ds) = (c(0.0, 0.0), c(0.0, 0.0));
                    for (k, (wk, lk)) in w.iter().zip(&sec.vals).enumerate() {
                        let v = sec.vecs[(i, k)] * sec.vecs[(j, k)];
                        s += wk * v;
                        ds += wk * (v * lk);
                    }
                    let at = (sec.levels[i], sec.levels[j]);
                    m[at] = s;
                    dm[at] = c(-ds.im, ds.re);
                }
            }
        }
        if t == 0.0 {
            m = CMat::identity(dim, dim);
        }
        (m, dm)
    }
}

/// Spectra of the reference generators at one cutoff.
#[derive(Debug)]
pub(crate) struct Spectra {
    /// `a + a†` in the padded space: `D(r, π/2) = exp(ir(a + a†))`.
    position: Spectrum,
    /// `−½(a² + a†²)` in the padded space: `S(r, π/2) = exp(irH)`.
    squeeze: Spectrum,
    /// `a†b + ab†` per photon-number block: `BS(θ, π/2) = exp(iθH)`.
    blocks: Vec<Spectrum>,
}

impl Spectra {
    fn new(cutoff: usize) -> Self {
        let k = padded_dim(cutoff);
        let position = Spectrum::banded(k, 1, |i| ((i + 1) as f64).sqrt());
        let squeeze = Spectrum::banded(k, 2, |i| -0.5 * (((i + 1) * (i + 2)) as f64).sqrt());
        let blocks = (0..=2 * (cutoff - 1))
            .map(|n| Spectrum::banded(n + 1, 1, |j| ((j + 1) as f64 * (n - j) as f64).sqrt()))
            .collect();
        Spectra {
            position,
            squeeze,
            blocks,
        }
    }

    /// Cached per cutoff and shared between threads.
    pub(crate) fn get(cutoff: usize) -> Arc<Spectra> {
        static CACHE: OnceLock<RwLock<HashMap<usize, Arc<Spectra>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        if let Some(s) = cache.read().unwrap_or_else(PoisonError::into_inner).get(&cutoff) {
            return s.clone();
        }
        let built = Arc::new(Spectra::new(cutoff));
        cache
            .write()
            .unwrap_or_else(PoisonError::into_inner)
            .entry(cutoff)
            .or_insert(built)
            .clone()
    }
}

/// Applies the phase rotation `M_ij ← e^{iθ(i−j)}·M_ij` to a reference gate
/// `(M, dM/dr)` and returns `(M, [dM/dr, dM/dφ])` with `θ = k·(φ − π/2)`.
fn rotate(base: (CMat, CMat), phi: f64, k: f64) -> (CMat, [CMat; 2]) {
    let (mut m, mut dr) = base;
    let theta = k * (phi - FRAC_PI_2);
    let mut dphi = CMat::zeros(m.nrows(), m.ncols());
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            let shift = i as f64 - j as f64;
            let ph = C64::from_polar(1.0, theta * shift);
            m[(i, j)] *= ph;
            dr[(i, j)] *= ph;
            dphi[(i, j)] = m[(i, j)] * c(0.0, k * shift);
        }
    }
    (m, [dr, dphi])
}

fn spectral(gate: Gate, cutoff: usize) -> (CMat, [CMat; 2]) {
    let sp = Spectra::get(cutoff);
    match gate {
        Gate::Squeeze { r, phi } => rotate(sp.squeeze.exp(r, cutoff), phi, 0.5),
        Gate::Displace { r, phi } => rotate(sp.position.exp(r, cutoff), phi, 1.0),
        Gate::Beamsplitter { theta, phi } => {
            let d = cutoff * cutoff;
            let mut m = CMat::zeros(d, d);
            let mut dtheta = CMat::zeros(d, d);
            let mut dphi = CMat::zeros(d, d);
            for (n, block) in sp.blocks.iter().enumerate() {
                let (e, [et, ep]) = rotate(block.exp(theta, n + 1), phi, 1.0);
                for i in block_window(n, cutoff) {
                    for j in block_window(n, cutoff) {
                        let at = (i * cutoff + (n - i), j * cutoff + (n - j));
                        m[at] = e[(i, j)];
                        dtheta[at] = et[(i, j)];
                        dphi[at] = ep[(i, j)];
                    }
                }
            }
            (m, [dtheta, dphi])
        }
        _ => unreachable!("diagonal gates have no spectral form"),
    }
}

#[derive(Clone)]
enum Tape {
    Padded { dr: CMat, dphi: CMat, tape: Arc<ExpmTape> },
    Diagonal,
    Blocks(Vec<(CMat, CMat, Arc<ExpmTape>)>),
    /// Derivatives of the matrix in both parameters.
    Dense(Box<[CMat; 2]>),
}

/// A gate matrix together with what its reverse pass needs.
#[derive(Clone)]
pub(crate) struct TapedGate {
    pub gate: Gate,
    pub matrix: CMat,
    cutoff: usize,
    tape: Tape,
}

fn check(gate: Gate, cutoff: usize) -> Result<()> {
    if cutoff < 2 {
        return Err(Error::Config(format!("Fock cutoff {cutoff} below 2")));
    }
    if gate.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::contract("gate_matrix", format!("non-finite parameters in {gate:?}")));
    }
    Ok(())
}

fn diagonal(cutoff: usize, phase: impl Fn(usize) -> f64) -> CMat {
    CMat::from_diagonal(&nalgebra::DVector::from_fn(cutoff, |n, _| C64::from_polar(1.0, phase(n))))
}

pub(crate) fn taped(gate: Gate, cutoff: usize, backend: GateBackend) -> Result<TapedGate> {
    check(gate, cutoff)?;
    let (matrix, tape) = match (gate, backend) {
        (Gate::Rotation { phi }, _) => (diagonal(cutoff, |n| phi * n as f64), Tape::Diagonal),
        (Gate::Kerr { kappa }, _) => (diagonal(cutoff, |n| kappa * (n * n) as f64), Tape::Diagonal),
        (_, GateBackend::Spectral) => {
            let (m, d) = spectral(gate, cutoff);
            (m, Tape::Dense(Box::new(d)))
        }
        (Gate::Squeeze { .. } | Gate::Displace { .. }, GateBackend::Taylor) => {
            let (x, dr, dphi) = single_mode_generator(gate, padded_dim(cutoff));
            let (e, tape) = expm_taped(&x);
            (
                e.view((0, 0), (cutoff, cutoff)).into_owned(),
                Tape::Padded {
                    dr,
                    dphi,
                    tape: Arc::new(tape),
                },
            )
        }
        (Gate::Beamsplitter { theta, phi }, GateBackend::Taylor) => {
            let d = cutoff * cutoff;
            let mut m = CMat::zeros(d, d);
            let mut blocks = Vec::with_capacity(2 * cutoff - 1);
            for n in 0..=2 * (cutoff - 1) {
                let (x, dtheta, dphi) = beamsplitter_generator(theta, phi, n);
                let (e, tape) = expm_taped(&x);
                for i in block_window(n, cutoff) {
                    for j in block_window(n, cutoff) {
                        m[(i * cutoff + (n - i), j * cutoff + (n - j))] = e[(i, j)];
                    }
                }
                blocks.push((dtheta, dphi, Arc::new(tape)));
            }
            (m, Tape::Blocks(blocks))
        }
    };
    Ok(TapedGate {
        gate,
        matrix,
        cutoff,
        tape,
    })
}

/// Cutoff-sized matrix of a gate: `cutoff×cutoff` for single-mode gates,
/// `cutoff²×cutoff²` for beamsplitters with basis index `n_a·cutoff + n_b`.
pub fn gate_matrix(gate: Gate, cutoff: usize) -> Result<CMat> {
    gate_matrix_with(gate, cutoff, GateBackend::default())
}

pub fn gate_matrix_with(gate: Gate, cutoff: usize, backend: GateBackend) -> Result<CMat> {
    Ok(taped(gate, cutoff, backend)?.matrix)
}

impl TapedGate {
    /// Gradients of the two gate parameters given the gradient of the matrix.
    /// The second entry is zero for one-parameter gates.
    pub(crate) fn param_grads(&self, gbar: &CMat) -> [f64; 2] {
        let cut = self.cutoff;
        match &self.tape {
            Tape::Dense(d) => [real_inner(gbar, &d[0]), real_inner(gbar, &d[1])],
            Tape::Padded { dr, dphi, tape } => {
                let k = dr.nrows();
                let mut ebar = CMat::zeros(k, k);
                ebar.view_mut((0, 0), (cut, cut)).copy_from(gbar);
                let xbar = expm_backward(tape, &ebar);
                [real_inner(&xbar, dr), real_inner(&xbar, dphi)]
            }
            Tape::Diagonal => {
                let mut g = 0.0;
                for n in 0..cut {
                    let w = match self.gate {
                        Gate::Rotation { .. } => n as f64,
                        _ => (n * n) as f64,
                    };
                    g += (gbar[(n, n)].conj() * self.matrix[(n, n)] * c(0.0, w)).re;
                }
                [g, 0.0]
            }
            Tape::Blocks(blocks) => {
                let mut out = [0.0; 2];
                for (n, (dtheta, dphi, tape)) in blocks.iter().enumerate() {
                    let mut ebar = CMat::zeros(n + 1, n + 1);
                    for i in block_window(n, cut) {
                        for j in block_window(n, cut) {
                            ebar[(i, j)] = gbar[(i * cut + (n - i), j * cut + (n - j))];
                        }
                    }
                    let xbar = expm_backward(tape, &ebar);
                    out[0] += real_inner(&xbar, dtheta);
                    out[1] += real_inner(&xbar, dphi);
                }
                out
            }
        }
    }
}

/// `D(d, π/2) = exp(i·d·(a + a†))` from the cached spectrum, so the
/// per-sample encoding gate and its derivative in `d` are cheap.
#[derive(Clone, Debug)]
pub(crate) struct SpectralDisplacement {
    cutoff: usize,
    spectra: Arc<Spectra>,
}

impl SpectralDisplacement {
    pub(crate) fn new(cutoff: usize) -> Self {
        SpectralDisplacement {
            cutoff,
            spectra: Spectra::get(cutoff),
        }
    }

    pub(crate) fn matrix(&self, d: f64) -> CMat {
        self.spectra.position.exp(d, self.cutoff).0
    }

    pub(crate) fn matrix_and_derivative(&self, d: f64) -> (CMat, CMat) {
        self.spectra.position.exp(d, self.cutoff)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sample_gates() -> Vec<Gate> {
        vec![
            Gate::Squeeze { r: 0.37, phi: -1.1 },
            Gate::Squeeze { r: -0.8, phi: 2.6 },
            Gate::Displace { r: 0.83, phi: std::f64::consts::FRAC_PI_2 },
            Gate::Displace { r: 1.4, phi: 0.3 },
            Gate::Beamsplitter { theta: 0.9, phi: -0.4 },
            Gate::Beamsplitter { theta: -2.2, phi: 1.7 },
        ]
    }

    #[test]
    fn backends_agree_on_matrices_and_parameter_gradients() {
        for cut in [2, 5, 8] {
            for gate in sample_gates() {
                let s = taped(gate, cut, GateBackend::Spectral).unwrap();
                let t = taped(gate, cut, GateBackend::Taylor).unwrap();
                assert_abs_diff_eq!((&s.matrix - &t.matrix).norm(), 0.0, epsilon = 1e-12);
                let n = s.matrix.nrows();
                let gbar = CMat::from_fn(n, n, |i, j| c((i as f64 * 0.7 - j as f64).sin(), (i * j) as f64 % 1.3));
                let (a, b) = (s.param_grads(&gbar), t.param_grads(&gbar));
                for k in 0..2 {
                    assert_abs_diff_eq!(a[k], b[k], epsilon = 1e-10 * (1.0 + b[k].abs()));
                }
            }
        }
    }

    #[test]
    fn spectral_derivative_matches_difference() {
        let s = SpectralDisplacement::new(6);
        let h = 1e-6;
        let fd = (s.matrix(0.4 + h) - s.matrix(0.4 - h)) / c(2.0 * h, 0.0);
        assert_abs_diff_eq!((fd - s.matrix_and_derivative(0.4).1).norm(), 0.0, epsilon = 1e-8);
    }

    #[test]
    fn cutoff_below_two_is_rejected() {
        assert!(gate_matrix(Gate::Kerr { kappa: 0.1 }, 1).is_err());
        assert!(gate_matrix(Gate::Squeeze { r: f64::NAN, phi: 0.0 }, 4).is_err());
    }
}
