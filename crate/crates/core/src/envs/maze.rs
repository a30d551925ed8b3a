use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Environment, StepResult};
use crate::error::{Error, Result};

pub const GRID: usize = 8;
pub const CELL_PIXELS: usize = 6;
pub const SIDE: usize = GRID * CELL_PIXELS;
pub const MAX_STEPS: usize = 100;

pub const WALL: f64 = 0.0;
pub const BACKGROUND: f64 = 1.0;
pub const PLAYER: f64 = 0.66;
pub const TARGET: f64 = 0.33;

pub const GOAL_REWARD: f64 = 1.0;
pub const STEP_PENALTY: f64 = 0.01;
pub const BUMP_PENALTY: f64 = 0.1;

pub const DEFAULT_LAYOUT: &str = "\
########
#......#
#.##.#.#
#.#..#.#
#.#.##.#
#...#..#
#.#....#
########
";

pub type Cell = (usize, usize);

/// Action deltas for up, right, down, left.
const MOVES: [(isize, isize); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];

/// Fixed 8×8 wall bitmap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MazeLayout {
    walls: [[bool; GRID]; GRID],
}

impl Default for MazeLayout {
    fn default() -> Self {
        MazeLayout::parse(DEFAULT_LAYOUT).expect("default layout is valid")
    }
}

impl MazeLayout {
    pub fn from_walls(walls: [[bool; GRID]; GRID]) -> Self {
        MazeLayout { walls }
    }

    /// Eight lines of eight characters, `#` for walls and `.` for free cells.
    pub fn parse(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().map(str::trim_end).filter(|l| !l.is_empty()).collect();
        if rows.len() != GRID {
            return Err(Error::Config(format!("maze layout has {} rows, expected {GRID}", rows.len())));
        }
        let mut walls = [[false; GRID]; GRID];
        for (r, line) in rows.iter().enumerate() {
            let chars: Vec<char> = line.chars().collect();
            if chars.len() != GRID {
                return Err(Error::Config(format!(
                    "maze layout row {r} has {} columns, expected {GRID}",
                    chars.len()
                )));
            }
            for (c, ch) in chars.into_iter().enumerate() {
                walls[r][c] = match ch {
                    '#' => true,
                    '.' => false,
                    other => return Err(Error::Config(format!("maze layout row {r}: unexpected character {other:?}"))),
                };
            }
        }
        let layout = MazeLayout { walls };
        if layout.free_cells().len() < 2 {
            return Err(Error::Config("maze layout needs at least two free cells".into()));
        }
        Ok(layout)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        MazeLayout::parse(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn is_wall(&self, (r, c): Cell) -> bool {
        self.walls[r][c]
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        (0..GRID)
            .flat_map(|r| (0..GRID).map(move |c| (r, c)))
            .filter(|&cell| !self.is_wall(cell))
            .collect()
    }

    /// Destination of a move; `None` when it would leave the grid or enter a wall.
    pub fn neighbour(&self, (r, c): Cell, action: usize) -> Option<Cell> {
        let (dr, dc) = MOVES[action];
        let nr = r.checked_add_signed(dr).filter(|&v| v < GRID)?;
        let nc = c.checked_add_signed(dc).filter(|&v| v < GRID)?;
        (!self.walls[nr][nc]).then_some((nr, nc))
    }

    /// Breadth-first distances from `from` to every cell (`None` if unreachable).
    pub fn distances(&self, from: Cell) -> [[Option<usize>; GRID]; GRID] {
        let mut dist = [[None; GRID]; GRID];
        if self.is_wall(from) {
            return dist;
        }
        dist[from.0][from.1] = Some(0);
        let mut queue = VecDeque::from([from]);
        while let Some(cell) = queue.pop_front() {
            let d = dist[cell.0][cell.1].unwrap();
            for a in 0..4 {
                if let Some(n) = self.neighbour(cell, a) {
                    if dist[n.0][n.1].is_none() {
                        dist[n.0][n.1] = Some(d + 1);
                        queue.push_back(n);
                    }
                }
            }
        }
        dist
    }

    /// Mean of `1 − 0.01·distance` over all ordered pairs of distinct, mutually
    /// reachable free cells, i.e. the expected best episode return under the
    /// reset distribution.
    pub fn mean_optimum(&self) -> f64 {
        let (mut total, mut n) = (0.0, 0usize);
        for from in self.free_cells() {
            let dist = self.distances(from);
            for to in self.free_cells() {
                if let (true, Some(d)) = (to != from, dist[to.0][to.1]) {
                    total += GOAL_REWARD - STEP_PENALTY * d as f64;
                    n += 1;
                }
            }
        }
        total / n.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MazeState {
    pub layout: MazeLayout,
    pub player: Cell,
    pub target: Option<Cell>,
    pub steps: usize,
}

impl MazeState {
    /// A state with no player or target drawn; `player` is ignored by rendering.
    pub fn empty(layout: MazeLayout) -> Self {
        MazeState {
            layout,
            player: (usize::MAX, usize::MAX),
            target: None,
            steps: 0,
        }
    }
}

/// 48×48 row-major grayscale image; every cell fills its 6×6 block.
pub fn maze_render(state: &MazeState) -> Vec<f64> {
    let mut img = vec![BACKGROUND; SIDE * SIDE];
    let mut fill = |(r, c): Cell, v: f64| {
        for y in r * CELL_PIXELS..(r + 1) * CELL_PIXELS {
            img[y * SIDE + c * CELL_PIXELS..y * SIDE + (c + 1) * CELL_PIXELS].fill(v);
        }
    };
    for r in 0..GRID {
        for c in 0..GRID {
            if state.layout.is_wall((r, c)) {
                fill((r, c), WALL);
            }
        }
    }
    if let Some(t) = state.target {
        fill(t, TARGET);
    }
    if state.player.0 < GRID && state.player.1 < GRID {
        fill(state.player, PLAYER);
    }
    img
}

/// Minimal number of moves from player to target.
pub fn shortest_path(state: &MazeState) -> Result<usize> {
    let target = state
        .target
        .ok_or_else(|| Error::Env("maze state has no target".into()))?;
    state.layout.distances(state.player)[target.0][target.1]
        .ok_or_else(|| Error::Env(format!("target {target:?} unreachable from {:?}", state.player)))
}

/// Grid navigation with player and target resampled every episode.
#[derive(Clone, Debug)]
pub struct Maze {
    state: MazeState,
    max_steps: usize,
    optimum: f64,
    mean_optimum: f64,
    done: bool,
}

impl Default for Maze {
    fn default() -> Self {
        Maze::new(MazeLayout::default(), MAX_STEPS)
    }
}

impl Maze {
    pub fn new(layout: MazeLayout, max_steps: usize) -> Self {
        let mean_optimum = layout.mean_optimum();
        Maze {
            state: MazeState::empty(layout),
            max_steps,
            optimum: 0.0,
            mean_optimum,
            done: true,
        }
    }

    pub fn state(&self) -> &MazeState {
        &self.state
    }

    /// Starts an episode from explicit player and target cells.
    pub fn reset_to(&mut self, player: Cell, target: Cell) -> Result<Vec<f64>> {
        let layout = &self.state.layout;
        if player == target || layout.is_wall(player) || layout.is_wall(target) {
            return Err(Error::Env(format!("invalid maze start {player:?} → {target:?}")));
        }
        let s = MazeState {
            layout: layout.clone(),
            player,
            target: Some(target),
            steps: 0,
        };
        let d = shortest_path(&s)?;
        self.state = s;
        self.optimum = GOAL_REWARD - STEP_PENALTY * d as f64;
        self.done = false;
        Ok(maze_render(&self.state))
    }
}

impl Environment for Maze {
    fn observation_dim(&self) -> usize {
        SIDE * SIDE
    }

    fn n_actions(&self) -> usize {
        4
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let free = self.state.layout.free_cells();
        loop {
            let pair: Vec<&Cell> = free.choose_multiple(&mut rng, 2).collect();
            if let Ok(obs) = self.reset_to(*pair[0], *pair[1]) {
                return obs;
            }
        }
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        if action > 3 {
            return Err(Error::Env(format!("maze action {action} is not in 0..4")));
        }
        if self.done {
            return Err(Error::Env("step after episode end; call reset".into()));
        }
        let mut reward = -STEP_PENALTY;
        let mut info = std::collections::BTreeMap::new();
        match self.state.layout.neighbour(self.state.player, action) {
            Some(n) => self.state.player = n,
            None => {
                reward -= BUMP_PENALTY;
                info.insert("bump".to_string(), 1.0);
            }
        }
        self.state.steps += 1;
        let terminated = Some(self.state.player) == self.state.target;
        if terminated {
            reward += GOAL_REWARD;
        }
        let truncated = !terminated && self.state.steps >= self.max_steps;
        self.done = terminated || truncated;
        Ok(StepResult {
            observation: maze_render(&self.state),
            reward,
            terminated,
            truncated,
            info,
        })
    }

    fn episode_optimum(&self) -> f64 {
        self.optimum
    }

    fn mean_optimum(&self) -> f64 {
        self.mean_optimum
    }
}
