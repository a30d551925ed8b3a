use std::f64::consts::{FRAC_PI_2, PI, SQRT_2};

use approx::assert_abs_diff_eq;
use latent_qrl::photonic::{
    annihilation, cv_action_distribution, cv_policy_gradients, displacement_encode, f_prep, gate_matrix, padded_dim,
    prepare_initial, run_cv_policy, CMat, CvCircuit, CvLayerParams, CvPolicyConfig, CvPrep, FockState, Gate,
    GradientMethod,
};
use latent_qrl::Error;
use nalgebra::{DVector, SymmetricEigen};
use num_complex::Complex64 as C64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn apply(state: &mut FockState, mode: usize, gate: Gate) {
    let m = gate_matrix(gate, state.cutoff()).unwrap();
    state.apply_single(mode, &m);
}

fn coherent_mean(alpha_sq: f64, cutoff: usize) -> f64 {
    // Σ n·e^{−|α|²}|α|^{2n}/n! over the truncated range.
    let mut p = (-alpha_sq).exp();
    let mut mean = 0.0;
    for n in 1..cutoff {
        p *= alpha_sq / n as f64;
        mean += n as f64 * p;
    }
    mean
}

#[test]
fn rotation_and_kerr_are_diagonal_phases() {
    let r = gate_matrix(Gate::Rotation { phi: 0.37 }, 7).unwrap();
    let k = gate_matrix(Gate::Kerr { kappa: -0.21 }, 7).unwrap();
    for i in 0..7 {
        for j in 0..7 {
            if i == j {
                assert_abs_diff_eq!((r[(i, i)] - C64::from_polar(1.0, 0.37 * i as f64)).norm(), 0.0, epsilon = 1e-15);
                assert_abs_diff_eq!((k[(i, i)] - C64::from_polar(1.0, -0.21 * (i * i) as f64)).norm(), 0.0, epsilon = 1e-15);
            } else {
                assert_eq!(r[(i, j)], c(0.0, 0.0));
                assert_eq!(k[(i, j)], c(0.0, 0.0));
            }
        }
    }
}

#[test]
fn displacement_on_vacuum_is_coherent() {
    let mut s = FockState::vacuum(1, 20).unwrap();
    apply(&mut s, 0, Gate::Displace { r: 0.5, phi: 0.3 });
    assert_abs_diff_eq!(s.mean_photon(0), coherent_mean(0.25, 20), epsilon = 1e-12);
    assert_abs_diff_eq!(s.mean_photon(0), 0.25, epsilon = 1e-8);
}

#[test]
fn squeezed_vacuum_properties() {
    let s = prepare_initial(1, 30, 1e-6).unwrap();
    for (n, a) in s.amplitudes().iter().enumerate() {
        if n % 2 == 1 {
            assert_eq!(a.norm(), 0.0, "odd amplitude {n}");
        }
    }
    assert_abs_diff_eq!(s.mean_photon(0), 0.5f64.sinh().powi(2), epsilon = 1e-8);
    assert_abs_diff_eq!(s.mean_photon(0), 0.27154, epsilon = 1e-5);

    let two = prepare_initial(2, 10, 1e-3).unwrap();
    let (m0, m1) = (two.marginal(0), two.marginal(1));
    for (a, b) in m0.iter().zip(&m1) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-15);
    }
}

#[test]
fn initial_state_truncation_is_reported() {
    // The default CartPole cutoff keeps ~0.99988 of the squeezed vacuum.
    match prepare_initial(1, 10, 1e-6) {
        Err(Error::Truncation { norm, .. }) => assert!(norm > 0.9998 && norm < 1.0 - 1e-6),
        other => panic!("expected truncation error, got {other:?}"),
    }
    assert!(prepare_initial(1, 10, 1e-3).is_ok());
}

#[test]
fn f_prep_examples() {
    assert_eq!(f_prep(0.0), 0.0);
    assert_abs_diff_eq!(f_prep(1.0), 4.0 / PI * (PI / 4.0).cbrt(), epsilon = 1e-15);
    assert_abs_diff_eq!(f_prep(1.0), 1.174735, epsilon = 1e-6);
}

proptest! {
    #[test]
    fn f_prep_is_odd(x in -50.0f64..50.0) {
        prop_assert_eq!(f_prep(-x), -f_prep(x));
    }

    #[test]
    fn cv_distribution_is_shift_invariant(e in proptest::collection::vec(-3.0f64..3.0, 4), shift in -5.0f64..5.0) {
        let a = cv_action_distribution(&e, 4).unwrap();
        let shifted: Vec<f64> = e.iter().map(|v| v + shift).collect();
        let b = cv_action_distribution(&shifted, 4).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn displacement_encoding_examples() {
    let base = prepare_initial(2, 8, 1e-2).unwrap();
    let mut s = base.clone();
    displacement_encode(&mut s, &[0.0, 0.0], CvPrep::ArctanCbrt).unwrap();
    assert_eq!(s, base);

    // f_prep(z) = 0.3 on vacuum gives a coherent state with |α|² = 0.09.
    let z = (0.3 * PI / 4.0).powi(3).tan();
    assert_abs_diff_eq!(f_prep(z), 0.3, epsilon = 1e-14);
    let mut v = FockState::vacuum(1, 20).unwrap();
    displacement_encode(&mut v, &[z], CvPrep::ArctanCbrt).unwrap();
    assert_abs_diff_eq!(v.mean_photon(0), 0.09, epsilon = 1e-8);

    // Encodings on different modes commute.
    let mut a = base.clone();
    apply(&mut a, 0, Gate::Displace { r: 0.4, phi: FRAC_PI_2 });
    apply(&mut a, 1, Gate::Displace { r: -0.7, phi: FRAC_PI_2 });
    let mut b = base.clone();
    apply(&mut b, 1, Gate::Displace { r: -0.7, phi: FRAC_PI_2 });
    apply(&mut b, 0, Gate::Displace { r: 0.4, phi: FRAC_PI_2 });
    for (x, y) in a.amplitudes().iter().zip(b.amplitudes()) {
        assert_abs_diff_eq!((x - y).norm(), 0.0, epsilon = 1e-15);
    }

    assert!(matches!(
        displacement_encode(&mut s, &[0.1, 0.2, 0.3], CvPrep::ArctanCbrt),
        Err(Error::Config(_))
    ));
}

#[test]
fn parameter_counts() {
    for (layers, n) in [(1, 14), (3, 42), (6, 84)] {
        assert_eq!(CvPolicyConfig::new(2, layers, 10, 2).param_count(), n);
    }
    assert_eq!(CvLayerParams::count(6), 90);
}

#[test]
fn zero_layers_give_zero_momentum() {
    let cfg = CvPolicyConfig::new(2, 0, 10, 2);
    let out = run_cv_policy(&[0.0, 0.0], &[], &cfg).unwrap();
    for e in out.expectations {
        assert_abs_diff_eq!(e, 0.0, epsilon = 1e-15);
    }
}

fn identity_single_mode(cutoff: usize) -> (CvCircuit, Vec<f64>) {
    let mut cfg = CvPolicyConfig::new(1, 1, cutoff, 2);
    cfg.prep = CvPrep::Identity;
    (CvCircuit::new(cfg).unwrap(), vec![0.0; CvLayerParams::count(1)])
}

#[test]
fn displaced_squeezed_vacuum_momentum() {
    let (circuit, params) = identity_single_mode(20);
    let bound = circuit.bind(&params).unwrap();
    for d in [0.1, 0.3, -0.45] {
        let out = bound.evaluate(&[d]).unwrap();
        assert_abs_diff_eq!(out.expectations[0], SQRT_2 * d, epsilon = 1e-6);
    }
}

#[test]
fn momentum_slope_in_displacement() {
    let mut cfg = CvPolicyConfig::new(2, 1, 30, 2);
    cfg.prep = CvPrep::Identity;
    let layers = CvLayerParams::unflatten(&[0.0; 14], 2).unwrap();
    let (_, gz) = cv_policy_gradients(&[0.2, 0.0], &layers, &cfg, &[1.0, 0.0]).unwrap();
    assert_abs_diff_eq!(gz[0], SQRT_2, epsilon = 1e-6);
    assert_abs_diff_eq!(gz[1], 0.0, epsilon = 1e-12);
}

fn random_layers(rng: &mut ChaCha8Rng, modes: usize, layers: usize, scale: f64) -> Vec<CvLayerParams> {
    let flat: Vec<f64> = (0..layers * CvLayerParams::count(modes))
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    CvLayerParams::unflatten(&flat, modes).unwrap()
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cfg = CvPolicyConfig::new(2, 1, 6, 2);
    cfg.trunc_tolerance = 1e-2;
    let layers = random_layers(&mut rng, 2, 1, 0.3);
    let (gp, gz) = cv_policy_gradients(&[0.4, 0.7], &layers, &cfg, &[0.0, 0.0]).unwrap();
    assert!(gp.iter().chain(&gz).all(|&v| v == 0.0));
}

#[test]
fn exact_gradients_agree_with_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for reupload in [false, true] {
        let mut cfg = CvPolicyConfig::new(2, 1, 10, 2);
        cfg.reupload = reupload;
        let layers = random_layers(&mut rng, 2, 1, 0.4);
        let z = [rng.random_range(0.05..1.0), rng.random_range(0.05..1.0)];
        let u = [0.8, -1.3];
        let (ep, ez) = cv_policy_gradients(&z, &layers, &cfg, &u).unwrap();
        cfg.gradient = GradientMethod::FiniteDifference { step: 1e-4 };
        let (fp, fz) = cv_policy_gradients(&z, &layers, &cfg, &u).unwrap();
        for (a, n) in ep.iter().chain(&ez).zip(fp.iter().chain(&fz)) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-2);
            assert!(rel < 1e-4, "exact {a} vs fd {n}");
        }
    }
}

#[test]
fn gaussian_gates_preserve_norm_up_to_truncation() {
    for phi in [0.0, 1.1, FRAC_PI_2, -2.0] {
        let mut s = FockState::vacuum(1, 20).unwrap();
        apply(&mut s, 0, Gate::Squeeze { r: 0.5, phi });
        assert!(s.norm_sqr() >= 1.0 - 1e-6);
        for r in [0.2, 0.7, 1.0] {
            let mut d = FockState::vacuum(1, 20).unwrap();
            apply(&mut d, 0, Gate::Displace { r, phi });
            assert!(d.norm_sqr() >= 1.0 - 1e-6);
        }
    }
}

#[test]
fn diagonal_gates_preserve_norm_exactly() {
    let mut s = prepare_initial(2, 10, 1e-3).unwrap();
    apply(&mut s, 0, Gate::Displace { r: 0.6, phi: 0.2 });
    let n0 = s.norm_sqr();
    apply(&mut s, 0, Gate::Kerr { kappa: 0.9 });
    apply(&mut s, 1, Gate::Rotation { phi: -2.3 });
    assert_abs_diff_eq!(s.norm_sqr(), n0, epsilon = 1e-14);
}

#[test]
fn displacement_inverse_on_vacuum() {
    let mut s = FockState::vacuum(1, 20).unwrap();
    apply(&mut s, 0, Gate::Displace { r: 0.8, phi: 0.4 });
    apply(&mut s, 0, Gate::Displace { r: -0.8, phi: 0.4 });
    let vac = FockState::vacuum(1, 20).unwrap();
    for (a, b) in s.amplitudes().iter().zip(vac.amplitudes()) {
        assert_abs_diff_eq!((a - b).norm(), 0.0, epsilon = 1e-8);
    }
}

// ---- dense oracle -------------------------------------------------------

/// `exp(X)` for anti-Hermitian `X` through the eigendecomposition of `iX`.
fn exp_anti_hermitian(x: &CMat) -> CMat {
    let h = x.map(|v| v * c(0.0, 1.0));
    let eig = SymmetricEigen::new(h);
    let v = &eig.eigenvectors;
    let d = DVector::from_iterator(v.ncols(), eig.eigenvalues.iter().map(|&l| C64::from_polar(1.0, -l)));
    v * CMat::from_diagonal(&d) * v.adjoint()
}

fn kron(a: &CMat, b: &CMat) -> CMat {
    let (ra, ca, rb, cb) = (a.nrows(), a.ncols(), b.nrows(), b.ncols());
    CMat::from_fn(ra * rb, ca * cb, |i, j| a[(i / rb, j / cb)] * b[(i % rb, j % cb)])
}

fn single_mode_oracle(gate: Gate, cut: usize) -> CMat {
    let k = padded_dim(cut);
    let a = annihilation(k);
    let ad = a.adjoint();
    let x = match gate {
        Gate::Squeeze { r, phi } => {
            let z = C64::from_polar(r, phi);
            (&a * &a * z.conj() - &ad * &ad * z) * c(0.5, 0.0)
        }
        Gate::Displace { r, phi } => {
            let al = C64::from_polar(r, phi);
            &ad * al - &a * al.conj()
        }
        Gate::Kerr { kappa } => {
            let n = &ad * &a;
            &n * &n * c(0.0, kappa)
        }
        _ => unreachable!(),
    };
    exp_anti_hermitian(&x).view((0, 0), (cut, cut)).into_owned()
}

fn beamsplitter_oracle(theta: f64, phi: f64, cut: usize) -> CMat {
    // Per-mode dimension 2c−1 contains every photon-number block that touches
    // the cutoff window, so entries inside the window are exact.
    let d = 2 * cut - 1;
    let a = annihilation(d);
    let id = CMat::identity(d, d);
    let (a1, a2) = (kron(&a, &id), kron(&id, &a));
    let e = C64::from_polar(1.0, phi);
    let x = (&a1.adjoint() * &a2 * e - &a1 * &a2.adjoint() * e.conj()) * c(theta, 0.0);
    let full = exp_anti_hermitian(&x);
    CMat::from_fn(cut * cut, cut * cut, |i, j| full[((i / cut) * d + i % cut, (j / cut) * d + j % cut)])
}

fn oracle_policy(z: &[f64], layers: &[CvLayerParams], cut: usize, reupload: bool) -> Vec<f64> {
    let id = CMat::identity(cut, cut);
    let on = |m: usize, g: &CMat| if m == 0 { kron(g, &id) } else { kron(&id, g) };
    let sq = single_mode_oracle(Gate::Squeeze { r: 0.5, phi: FRAC_PI_2 }, cut);
    let mut psi: DVector<C64> = kron(&sq, &sq).column(0).into_owned();
    let encode = |psi: &mut DVector<C64>| {
        for (j, &zj) in z.iter().enumerate() {
            let d = single_mode_oracle(Gate::Displace { r: f_prep(zj), phi: FRAC_PI_2 }, cut);
            *psi = on(j, &d) * &*psi;
        }
    };
    if layers.is_empty() {
        encode(&mut psi);
    }
    for (l, p) in layers.iter().enumerate() {
        if l == 0 || reupload {
            encode(&mut psi);
        }
        let (t, ph) = p.interferometer1[0];
        psi = beamsplitter_oracle(t, ph, cut) * psi;
        for m in 0..2 {
            let (r, ph) = p.squeeze[m];
            psi = on(m, &single_mode_oracle(Gate::Squeeze { r, phi: ph }, cut)) * psi;
        }
        let (t, ph) = p.interferometer2[0];
        psi = beamsplitter_oracle(t, ph, cut) * psi;
        for m in 0..2 {
            let (r, ph) = p.displace[m];
            psi = on(m, &single_mode_oracle(Gate::Displace { r, phi: ph }, cut)) * psi;
        }
        for m in 0..2 {
            psi = on(m, &single_mode_oracle(Gate::Kerr { kappa: p.kerr[m] }, cut)) * psi;
        }
    }
    let a = annihilation(cut);
    let p_op = (a.adjoint() - &a) * c(0.0, 1.0 / SQRT_2);
    let norm = psi.norm_squared();
    (0..2)
        .map(|m| (psi.adjoint() * on(m, &p_op) * &psi)[(0, 0)].re / norm)
        .collect()
}

#[test]
fn kerr_gate_matches_exponentiated_generator() {
    let a = gate_matrix(Gate::Kerr { kappa: 0.13 }, 6).unwrap();
    let b = single_mode_oracle(Gate::Kerr { kappa: 0.13 }, 6);
    assert_abs_diff_eq!((a - b).norm(), 0.0, epsilon = 1e-12);
}

#[test]
fn beamsplitter_matches_two_mode_oracle() {
    let a = gate_matrix(Gate::Beamsplitter { theta: 0.9, phi: -0.4 }, 5).unwrap();
    let b = beamsplitter_oracle(0.9, -0.4, 5);
    assert_abs_diff_eq!((a - b).norm(), 0.0, epsilon = 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn policy_matches_dense_oracle(seed in 0u64..100_000, layers in 0usize..3, reupload in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = CvPolicyConfig::new(2, layers, 6, 2);
        cfg.reupload = reupload;
        cfg.trunc_tolerance = 0.5;
        let params = random_layers(&mut rng, 2, layers, 0.5);
        let z = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let got = run_cv_policy(&z, &params, &cfg).unwrap().expectations;
        let want = oracle_policy(&z, &params, 6, reupload);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-10, "{} vs {}", g, w);
        }
    }
}
