use std::f64::consts::PI;

use approx::assert_abs_diff_eq;
use latent_qrl::grad::{check_gradients, Graph, ParamSet, Tensor};
use latent_qrl::qubit::{
    action_distribution, policy_gradients, run_policy, QubitPolicyConfig, QubitPolicyOp, QubitPrep, QubitState,
};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type CMat = DMatrix<C64>;

fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

fn kron(a: &CMat, b: &CMat) -> CMat {
    let (ra, ca, rb, cb) = (a.nrows(), a.ncols(), b.nrows(), b.ncols());
    CMat::from_fn(ra * rb, ca * cb, |i, j| a[(i / rb, j / cb)] * b[(i % rb, j % cb)])
}

/// Full `2^M` operator for a single-qubit matrix on qubit `q` (qubit q is bit q).
fn lift(u: &CMat, q: usize, m: usize) -> CMat {
    let mut out = CMat::identity(1, 1);
    for k in (0..m).rev() {
        let f = if k == q { u.clone() } else { CMat::identity(2, 2) };
        out = kron(&out, &f);
    }
    out
}

fn ry(t: f64) -> CMat {
    let (s, co) = (t / 2.0).sin_cos();
    CMat::from_row_slice(2, 2, &[c(co), c(-s), c(s), c(co)])
}

fn rz(t: f64) -> CMat {
    CMat::from_row_slice(2, 2, &[C64::from_polar(1.0, -t / 2.0), c(0.0), c(0.0), C64::from_polar(1.0, t / 2.0)])
}

fn cnot(control: usize, target: usize, m: usize) -> CMat {
    let d = 1 << m;
    CMat::from_fn(d, d, |i, j| {
        let mapped = if j >> control & 1 == 1 { j ^ (1 << target) } else { j };
        if i == mapped {
            c(1.0)
        } else {
            c(0.0)
        }
    })
}

/// Dense matrix-product evaluation of the policy circuit.
fn oracle(z: &[f64], params: &[f64], cfg: &QubitPolicyConfig) -> Vec<f64> {
    let m = cfg.qubits;
    let mut u = CMat::identity(1 << m, 1 << m);
    let embed = |u: &mut CMat| {
        for (j, &zj) in z.iter().enumerate() {
            *u = lift(&ry(cfg.prep.apply(zj)), j, m) * &*u;
        }
    };
    let mut p = 0;
    let mut block = 0;
    if cfg.layers == 0 {
        embed(&mut u);
    }
    for l in 0..cfg.layers {
        if l == 0 || cfg.reupload {
            embed(&mut u);
        }
        for _ in 0..cfg.blocks_per_layer {
            for q in 0..m {
                let (a, b, g) = (params[p], params[p + 1], params[p + 2]);
                p += 3;
                u = lift(&(rz(g) * ry(b) * rz(a)), q, m) * u;
            }
            if m > 1 {
                let offset = block % (m - 1) + 1;
                for i in 0..m {
                    let t = (i + offset) % m;
                    if t != i {
                        u = cnot(i, t, m) * u;
                    }
                }
            }
            block += 1;
        }
    }
    let psi: DVector<C64> = u.column(0).into_owned();
    (0..m)
        .map(|q| {
            psi.iter()
                .enumerate()
                .map(|(i, a)| if i >> q & 1 == 0 { a.norm_sqr() } else { -a.norm_sqr() })
                .sum()
        })
        .collect()
}

fn random_case(seed: u64, m: usize, layers: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
    let params: Vec<f64> = (0..3 * m * layers * 2).map(|_| rng.random_range(-PI..PI)).collect();
    (z, params)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn run_policy_matches_dense_oracle(
        seed in 0u64..1_000_000,
        m in 1usize..=4,
        layers in 0usize..=3,
        reupload in any::<bool>(),
        blocks in 1usize..=2,
        latent in 1usize..=4,
    ) {
        let mut cfg = QubitPolicyConfig::new(m, layers, 2.min(m));
        cfg.reupload = reupload;
        cfg.blocks_per_layer = blocks;
        let (z, params) = random_case(seed, m, layers);
        let z = &z[..latent.min(m)];
        let params = &params[..cfg.param_count()];
        if m >= 2 {
            let got = run_policy(z, params, &cfg).unwrap();
            let want = oracle(z, params, &cfg);
            for (g, w) in got.iter().zip(&want) {
                prop_assert!((g - w).abs() < 1e-10, "{} vs {}", g, w);
                prop_assert!(g.abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences(seed in 0u64..1_000_000, m in 2usize..=4, layers in 1usize..=3, reupload in any::<bool>()) {
        let mut cfg = QubitPolicyConfig::new(m, layers, 2);
        cfg.reupload = reupload;
        let (z, params) = random_case(seed, m, layers);
        let params = &params[..cfg.param_count()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let u: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (gp, gz) = policy_gradients(&z, params, &cfg, &u).unwrap();
        let loss = |z: &[f64], p: &[f64]| -> f64 {
            run_policy(z, p, &cfg).unwrap().iter().zip(&u).map(|(e, w)| e * w).sum()
        };
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-2);
        let mut probe = params.to_vec();
        for i in 0..params.len() {
            probe[i] = params[i] + h;
            let fp = loss(&z, &probe);
            probe[i] = params[i] - h;
            let fm = loss(&z, &probe);
            probe[i] = params[i];
            let n = (fp - fm) / (2.0 * h);
            prop_assert!(rel(gp[i], n) < 1e-6, "param {}: {} vs {}", i, gp[i], n);
        }
        let mut zp = z.clone();
        for j in 0..z.len() {
            zp[j] = z[j] + h;
            let fp = loss(&zp, params);
            zp[j] = z[j] - h;
            let fm = loss(&zp, params);
            zp[j] = z[j];
            let n = (fp - fm) / (2.0 * h);
            prop_assert!(rel(gz[j], n) < 1e-6, "z {}: {} vs {}", j, gz[j], n);
        }
    }

    #[test]
    fn gates_preserve_norm(seed in 0u64..1_000_000, m in 1usize..=6, len in 1usize..=1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = QubitState::zero(m).unwrap();
        for _ in 0..len {
            let q = rng.random_range(0..m);
            match rng.random_range(0..4) {
                0 => s.apply_ry(q, rng.random_range(-10.0..10.0)),
                1 => s.apply_rz(q, rng.random_range(-10.0..10.0)),
                2 => s.apply_rot(q, rng.random_range(-PI..PI), rng.random_range(-PI..PI), rng.random_range(-PI..PI)),
                _ => {
                    let t = rng.random_range(0..m);
                    if t != q {
                        s.apply_cnot(q, t);
                    }
                }
            }
        }
        prop_assert!((s.norm_sqr() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn action_distribution_is_a_probability_vector(e in proptest::collection::vec(-1.0f64..=1.0, 2..8), n in 2usize..8) {
        let n = n.min(e.len());
        let p = action_distribution(&e, n).unwrap();
        prop_assert_eq!(p.len(), n);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reupload_with_one_layer_is_bit_identical(seed in 0u64..1_000_000, m in 2usize..=4) {
        let (z, params) = random_case(seed, m, 1);
        let mut cfg = QubitPolicyConfig::new(m, 1, 2);
        let params = &params[..cfg.param_count()];
        let a = run_policy(&z, params, &cfg).unwrap();
        cfg.reupload = true;
        let b = run_policy(&z, params, &cfg).unwrap();
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn beta_derivative_is_minus_sine() {
    // Only qubit 1 rotates; the CNOT ring then copies it onto qubit 0 and
    // leaves ⟨Z_1⟩ = cos β.
    let cfg = QubitPolicyConfig::new(2, 1, 2);
    let beta = 0.7;
    let mut params = vec![0.0; 6];
    params[4] = beta;
    let e = run_policy(&[0.0], &params, &cfg).unwrap();
    assert_abs_diff_eq!(e[1], beta.cos(), epsilon = 1e-14);
    let (gp, _) = policy_gradients(&[0.0], &params, &cfg, &[0.0, 1.0]).unwrap();
    assert_abs_diff_eq!(gp[4], -beta.sin(), epsilon = 1e-10);
}

#[test]
fn configuration_errors() {
    let cfg = QubitPolicyConfig::new(2, 1, 2);
    assert!(run_policy(&[0.1, 0.2, 0.3], &[0.0; 6], &cfg).is_err());
    assert!(run_policy(&[0.1], &[0.0; 5], &cfg).is_err());
    assert!(QubitPolicyConfig::new(2, 1, 3).validate(2).is_err());
    assert!(QubitState::zero(13).is_err());
}

#[test]
fn graph_op_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for layers in 1..=3 {
        let cfg = QubitPolicyConfig::new(2, layers, 2);
        let mut p = ParamSet::new();
        p.insert(
            "policy.theta",
            Tensor::vector((0..cfg.param_count()).map(|_| rng.random_range(-PI..PI)).collect()),
        );
        p.insert(
            "encoder.z",
            Tensor::new(vec![3, 2], (0..6).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap(),
        );
        let cfg2 = cfg.clone();
        let report = check_gradients(
            move |g: &mut Graph, b| {
                let out = g.custom(&[b.get("encoder.z")?, b.get("policy.theta")?], Box::new(QubitPolicyOp::new(cfg2.clone())))?;
                let probs = g.softmax(out)?;
                let picked = g.gather(probs, &[0, 1, 1])?;
                let logp = g.log(picked);
                Ok(g.sum(logp))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "L={layers}: {:?}", report.per_param);
    }
}

#[test]
fn prep_scales_angles() {
    assert_eq!(QubitPrep::Pi.apply(0.5), PI / 2.0);
    assert_eq!(QubitPrep::Identity.apply(0.5), 0.5);
}
