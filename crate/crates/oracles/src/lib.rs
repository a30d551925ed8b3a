//! Brute-force reference computations for checking `latent-qrl`.
//!
//! Nothing here shares code paths with the library beyond its configuration
//! types: circuits are multiplied out as dense `2^M` matrices, advantages are
//! summed term by term and maze distances come from exhaustive search.

use latent_qrl::envs::maze::{Cell, GRID};
use latent_qrl::qubit::QubitPolicyConfig;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;

type CMat = DMatrix<C64>;

fn real(re: f64) -> C64 {
    C64::new(re, 0.0)
}

fn kron(a: &CMat, b: &CMat) -> CMat {
    let (ra, ca, rb, cb) = (a.nrows(), a.ncols(), b.nrows(), b.ncols());
    CMat::from_fn(ra * rb, ca * cb, |i, j| a[(i / rb, j / cb)] * b[(i % rb, j % cb)])
}

/// Full operator for a single-qubit matrix on qubit `q`; qubit q is bit q of
/// the basis index.
fn lift(u: &CMat, q: usize, m: usize) -> CMat {
    let mut out = CMat::identity(1, 1);
    for k in (0..m).rev() {
        let f = if k == q { u.clone() } else { CMat::identity(2, 2) };
        out = kron(&out, &f);
    }
    out
}

fn ry(t: f64) -> CMat {
    let (s, c) = (t / 2.0).sin_cos();
    CMat::from_row_slice(2, 2, &[real(c), real(-s), real(s), real(c)])
}

fn rz(t: f64) -> CMat {
    CMat::from_row_slice(
        2,
        2,
        &[C64::from_polar(1.0, -t / 2.0), real(0.0), real(0.0), C64::from_polar(1.0, t / 2.0)],
    )
}

fn cnot(control: usize, target: usize, m: usize) -> CMat {
    let d = 1 << m;
    CMat::from_fn(d, d, |i, j| {
        let mapped = if j >> control & 1 == 1 { j ^ (1 << target) } else { j };
        real(if i == mapped { 1.0 } else { 0.0 })
    })
}

/// Pauli-Z expectations of the policy circuit, from the dense product of
/// every gate applied to `|0…0⟩`.
pub fn dense_qubit_expectations(z: &[f64], params: &[f64], cfg: &QubitPolicyConfig) -> Vec<f64> {
    let m = cfg.qubits;
    let mut u = CMat::identity(1 << m, 1 << m);
    let embed = |u: &mut CMat| {
        for (j, &zj) in z.iter().enumerate() {
            *u = lift(&ry(cfg.prep.apply(zj)), j, m) * &*u;
        }
    };
    if cfg.layers == 0 {
        embed(&mut u);
    }
    let (mut p, mut block) = (0, 0);
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

/// Advantages as the explicit discounted sum of TD errors, restarted at every
/// episode end. Terminal steps do not bootstrap; truncated ones do.
pub fn direct_gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    terminated: &[bool],
    episode_end: &[bool],
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = rewards.len();
    let delta: Vec<f64> = (0..n)
        .map(|t| rewards[t] + if terminated[t] { 0.0 } else { gamma * next_values[t] } - values[t])
        .collect();
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            for l in t..n {
                total += (gamma * lambda).powi((l - t) as i32) * delta[l];
                if episode_end[l] {
                    break;
                }
            }
            total
        })
        .collect()
}

/// Depth-first enumeration of walks from `from`, pruned only where a cell was
/// already entered at a smaller or equal depth.
pub fn exhaustive_shortest_path(walls: &[[bool; GRID]; GRID], from: Cell, to: Cell) -> Option<usize> {
    fn go(
        walls: &[[bool; GRID]; GRID],
        at: Cell,
        to: Cell,
        depth: usize,
        seen: &mut [[usize; GRID]; GRID],
        best: &mut Option<usize>,
    ) {
        if seen[at.0][at.1] <= depth {
            return;
        }
        seen[at.0][at.1] = depth;
        if at == to {
            *best = Some(best.map_or(depth, |b| b.min(depth)));
            return;
        }
        let (r, c) = (at.0 as i64, at.1 as i64);
        for (nr, nc) in [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)] {
            if (0..GRID as i64).contains(&nr) && (0..GRID as i64).contains(&nc) && !walls[nr as usize][nc as usize] {
                go(walls, (nr as usize, nc as usize), to, depth + 1, seen, best);
            }
        }
    }
    let mut seen = [[usize::MAX; GRID]; GRID];
    let mut best = None;
    go(walls, from, to, 0, &mut seen, &mut best);
    best
}
