//! Matrix exponential by scaling-and-squaring around a Horner-form Taylor
//! core, with a reverse pass through the recorded steps.
//!
//! Complex gradients use the convention `Ā = ∂L/∂Re A + i·∂L/∂Im A`, so for a
//! product `C = A·B` the reverse rule is `Ā = C̄·Bᴴ`, `B̄ = Aᴴ·C̄`.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;

pub type CMat = DMatrix<C64>;

/// Taylor order after scaling; with `‖Y‖₁ ≤ 1/2` the remainder is below 1e-22.
const ORDER: usize = 18;

pub(crate) struct ExpmTape {
    squarings: u32,
    y: CMat,
    /// `H_q, H_{q−1}, …, H_1` where `H_{k−1} = I + Y·H_k / k` and `H_q = I`.
    horner: Vec<CMat>,
    /// `P_0 = T(Y), P_1, …, P_{s−1}` with `P_{i+1} = P_i²`.
    powers: Vec<CMat>,
}

fn one_norm(x: &CMat) -> f64 {
    x.column_iter()
        .map(|c| c.iter().map(|v| v.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub(crate) fn expm_taped(x: &CMat) -> (CMat, ExpmTape) {
    let n = x.nrows();
    let norm = one_norm(x);
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let y = x.map(|v| v / f64::from(2u32.pow(squarings)));
    let id = CMat::identity(n, n);

    let mut horner = Vec::with_capacity(ORDER);
    let mut h = id.clone();
    for k in (1..=ORDER).rev() {
        let next = &id + (&y * &h).map(|v| v / k as f64);
        horner.push(h);
        h = next;
    }

    let mut powers = Vec::with_capacity(squarings as usize);
    for _ in 0..squarings {
        let sq = &h * &h;
        powers.push(h);
        h = sq;
    }
    (
        h,
        ExpmTape {
            squarings,
            y,
            horner,
            powers,
        },
    )
}

pub fn expm(x: &CMat) -> CMat {
    expm_taped(x).0
}

/// Gradient with respect to the exponent, given the gradient of `exp(X)`.
pub(crate) fn expm_backward(tape: &ExpmTape, ebar: &CMat) -> CMat {
    let mut pbar = ebar.clone();
    for p in tape.powers.iter().rev() {
        let ph = p.adjoint();
        pbar = &pbar * &ph + &ph * &pbar;
    }
    let yh = tape.y.adjoint();
    let mut ybar = CMat::zeros(tape.y.nrows(), tape.y.ncols());
    let mut hbar = pbar;
    // horner[ORDER − k] holds H_k.
    for k in 1..=ORDER {
        let hk = &tape.horner[ORDER - k];
        let inv = 1.0 / k as f64;
        ybar += (&hbar * hk.adjoint()).map(|v| v * inv);
        hbar = (&yh * &hbar).map(|v| v * inv);
    }
    ybar.map(|v| v / f64::from(2u32.pow(tape.squarings)))
}

/// `Re Σ conj(Ā)∘B`, the real-parameter contraction for the gradient convention.
pub(crate) fn real_inner(abar: &CMat, b: &CMat) -> f64 {
    abar.iter().zip(b.iter()).map(|(x, y)| (x.conj() * y).re).sum()
}
