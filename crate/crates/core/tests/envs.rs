use approx::assert_abs_diff_eq;
use latent_qrl::envs::maze::{self, Cell, GRID, SIDE};
use latent_qrl::envs::{
    collect_random_observations, maze_render, shortest_path, CartPole, CartPoleState, EnvConfig, Environment, Maze,
    MazeLayout, MazeState,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn cartpole_single_step_matches_hand_computation() {
    let mut env = CartPole::default();
    env.reset_to(CartPoleState::default());
    let s = env.step(1).unwrap();
    let total = 1.1;
    let temp = 10.0 / total;
    let theta_acc = -temp / (0.5 * (4.0 / 3.0 - 0.1 / total));
    let x_acc = temp - 0.05 * theta_acc / total;
    assert_eq!(s.observation[0], 0.0);
    assert_abs_diff_eq!(s.observation[1], 0.02 * x_acc, epsilon = 1e-15);
    assert_eq!(s.observation[2], 0.0);
    assert_abs_diff_eq!(s.observation[3], 0.02 * theta_acc, epsilon = 1e-15);
    assert_eq!(s.reward, 1.0);
    assert!(!s.done());

    env.reset_to(CartPoleState::default());
    assert!(!env.step(0).unwrap().done());
}

#[test]
fn cartpole_contract() {
    let mut env = CartPole::default();
    assert!(env.step(0).is_err(), "step before reset");
    let obs = env.reset(3);
    assert_eq!(obs.len(), 4);
    assert!(obs.iter().all(|v| v.abs() <= 0.05));
    assert!(env.step(2).is_err());
    assert_eq!(env.episode_optimum(), 500.0);
}

#[test]
fn cartpole_truncates_at_cap_and_terminates_on_failure() {
    let mut env = CartPole::new(5);
    env.reset_to(CartPoleState::default());
    let mut last = None;
    for a in [0, 1, 0, 1, 0] {
        last = Some(env.step(a).unwrap());
    }
    let last = last.unwrap();
    assert!(last.truncated && !last.terminated);
    assert!(env.step(0).is_err());

    let mut env = CartPole::default();
    env.reset(0);
    let mut steps = 0;
    loop {
        steps += 1;
        let s = env.step(1).unwrap();
        if s.done() {
            assert!(s.terminated);
            break;
        }
    }
    assert!(steps < 100);
}

#[test]
fn cartpole_is_deterministic() {
    let run = |seed| {
        let mut env = CartPole::default();
        let mut out = env.reset(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let s = env.step(rng.random_range(0..2)).unwrap();
            out.extend(s.observation.iter());
            if s.done() {
                return out.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            }
        }
    };
    assert_eq!(run(11), run(11));
    assert_ne!(run(11), run(12));
}

fn open_layout() -> MazeLayout {
    MazeLayout::from_walls([[false; GRID]; GRID])
}

#[test]
fn render_levels_and_blocks() {
    let mut walls = [[false; GRID]; GRID];
    walls[0][0] = true;
    let state = MazeState {
        layout: MazeLayout::from_walls(walls),
        player: (2, 3),
        target: Some((5, 6)),
        steps: 0,
    };
    let img = maze_render(&state);
    assert_eq!(img.len(), 2304);
    let px = |y: usize, x: usize| img[y * SIDE + x];
    for r in 0..GRID {
        for c in 0..GRID {
            let v = px(6 * r, 6 * c);
            for y in 6 * r..6 * r + 6 {
                for x in 6 * c..6 * c + 6 {
                    assert_eq!(px(y, x), v);
                }
            }
        }
    }
    assert_eq!(px(0, 0), 0.0);
    assert_eq!(px(12, 18), 0.66);
    assert_eq!(px(30, 36), 0.33);
    assert_eq!(px(47, 47), 1.0);

    let empty = maze_render(&MazeState::empty(open_layout()));
    assert!(empty.iter().all(|&v| v == 1.0));
}

#[test]
fn moving_changes_exactly_72_pixels() {
    let mut env = Maze::new(open_layout(), 100);
    let before = env.reset_to((3, 3), (7, 7)).unwrap();
    let after = env.step(1).unwrap().observation;
    let changed = before.iter().zip(&after).filter(|(a, b)| a != b).count();
    assert_eq!(changed, 72);
}

#[test]
fn maze_rewards() {
    let mut env = Maze::new(open_layout(), 100);
    env.reset_to((3, 3), (3, 4)).unwrap();
    let s = env.step(1).unwrap();
    assert_abs_diff_eq!(s.reward, 0.99, epsilon = 1e-12);
    assert!(s.terminated);

    let obs = env.reset_to((0, 0), (5, 5)).unwrap();
    let s = env.step(0).unwrap();
    assert_abs_diff_eq!(s.reward, -0.11, epsilon = 1e-12);
    assert_eq!(s.observation, obs);
    assert_eq!(s.info.get("bump"), Some(&1.0));
    assert_eq!(env.state().player, (0, 0));
    assert!(env.step(4).is_err());
}

#[test]
fn maze_truncates_at_cap() {
    let mut env = Maze::new(open_layout(), 3);
    env.reset_to((0, 0), (7, 7)).unwrap();
    env.step(0).unwrap();
    env.step(0).unwrap();
    let s = env.step(0).unwrap();
    assert!(s.truncated && !s.terminated);
    assert!(env.step(0).is_err());
}

#[test]
fn layout_parsing() {
    let layout = MazeLayout::default();
    assert_eq!(layout, MazeLayout::parse(maze::DEFAULT_LAYOUT).unwrap());
    assert!(MazeLayout::parse("########\n").is_err());
    assert!(MazeLayout::parse(&maze::DEFAULT_LAYOUT.replace('.', "x")).is_err());
    assert!(MazeLayout::parse(&"#######\n".repeat(8)).is_err());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.txt");
    std::fs::write(&p, maze::DEFAULT_LAYOUT).unwrap();
    assert_eq!(MazeLayout::load(&p).unwrap(), layout);
    // Every pair of free cells in the shipped map is connected.
    for a in layout.free_cells() {
        let d = layout.distances(a);
        assert!(layout.free_cells().iter().all(|&(r, c)| d[r][c].is_some()));
    }
}

#[test]
fn shortest_path_examples() {
    let mut s = MazeState {
        layout: open_layout(),
        player: (1, 1),
        target: Some((1, 2)),
        steps: 0,
    };
    assert_eq!(shortest_path(&s).unwrap(), 1);
    s.target = Some((1, 4));
    assert_eq!(shortest_path(&s).unwrap(), 3);
    let mut walls = [[false; GRID]; GRID];
    for row in walls.iter_mut() {
        row[4] = true;
    }
    s.layout = MazeLayout::from_walls(walls);
    s.target = Some((1, 6));
    assert!(shortest_path(&s).is_err());
}

/// Exhaustive depth-first enumeration of simple paths, pruned only by the
/// best depth at which each cell has already been entered.
fn dfs_oracle(walls: &[[bool; GRID]; GRID], from: Cell, to: Cell) -> Option<usize> {
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

#[test]
fn shortest_path_matches_exhaustive_search_on_random_layouts() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    while checked < 100 {
        let mut walls = [[false; GRID]; GRID];
        for row in walls.iter_mut() {
            for w in row.iter_mut() {
                *w = rng.random_bool(0.3);
            }
        }
        let layout = MazeLayout::from_walls(walls);
        let free = layout.free_cells();
        if free.len() < 2 {
            continue;
        }
        let a = free[rng.random_range(0..free.len())];
        let b = free[rng.random_range(0..free.len())];
        let state = MazeState {
            layout,
            player: a,
            target: Some(b),
            steps: 0,
        };
        assert_eq!(shortest_path(&state).ok(), dfs_oracle(&walls, a, b), "{walls:?} {a:?} {b:?}");
        checked += 1;
    }
}

#[test]
fn bfs_policy_realises_episode_optimum() {
    let mut env = Maze::default();
    for seed in 0..20 {
        env.reset(seed);
        let opt = env.episode_optimum();
        let target = env.state().target.unwrap();
        let dist = env.state().layout.distances(target);
        let mut ret = 0.0;
        loop {
            let p = env.state().player;
            let a = (0..4)
                .find(|&a| {
                    env.state()
                        .layout
                        .neighbour(p, a)
                        .is_some_and(|(r, c)| dist[r][c].unwrap() + 1 == dist[p.0][p.1].unwrap())
                })
                .unwrap();
            let s = env.step(a).unwrap();
            ret += s.reward;
            if s.done() {
                assert!(s.terminated);
                break;
            }
        }
        assert_abs_diff_eq!(ret, opt, epsilon = 1e-12);
    }
}

#[test]
fn mean_optimum_matches_monte_carlo() {
    let mut env = Maze::default();
    let n = 10_000;
    let mc: f64 = (0..n)
        .map(|s| {
            env.reset(s);
            env.episode_optimum()
        })
        .sum::<f64>()
        / n as f64;
    assert!((mc - env.mean_optimum()).abs() < 0.005, "{mc} vs {}", env.mean_optimum());
}

#[test]
fn random_observation_dataset() {
    let mut env = EnvConfig::maze().build().unwrap();
    let ds = collect_random_observations(env.as_mut(), 50, 1).unwrap();
    assert_eq!(ds.len(), 50);
    assert_eq!(ds.dim(), 2304);
    let again = collect_random_observations(env.as_mut(), 50, 1).unwrap();
    assert_eq!(ds, again);
}

proptest! {
    #[test]
    fn maze_observations_use_four_levels(seed in 0u64..10_000, actions in proptest::collection::vec(0usize..4, 1..40)) {
        let mut env = Maze::default();
        let obs = env.reset(seed);
        prop_assert!(obs.iter().all(|v| [0.0, 0.33, 0.66, 1.0].contains(v)));
        let mut other = Maze::default();
        prop_assert_eq!(other.reset(seed), obs);
        for a in actions {
            let s = env.step(a).unwrap();
            let t = other.step(a).unwrap();
            prop_assert_eq!(&s, &t);
            prop_assert!(s.observation.iter().all(|v| [0.0, 0.33, 0.66, 1.0].contains(v)));
            if s.done() {
                break;
            }
        }
    }
}
