//! Seedable control problems: cart-pole balancing and a 48×48 visual maze.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nets::Dataset;

pub mod cartpole;
pub mod maze;

pub use cartpole::{CartPole, CartPoleState};
pub use maze::{maze_render, shortest_path, Maze, MazeLayout, MazeState};

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// The episode reached a terminal state.
    pub terminated: bool,
    /// The episode hit its step cap without terminating.
    pub truncated: bool,
    pub info: BTreeMap<String, f64>,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// Discrete-action episodic environment. Stepping after the end of an episode
/// is an error until the next reset.
pub trait Environment: Send {
    fn observation_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    /// Starts a new episode fully determined by `seed`.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: usize) -> Result<StepResult>;
    /// Best achievable return for the current episode.
    fn episode_optimum(&self) -> f64;
    /// Expected best return under the reset distribution.
    fn mean_optimum(&self) -> f64;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnvConfig {
    Cartpole {
        #[serde(default = "default_cartpole_steps")]
        max_steps: usize,
    },
    Maze {
        /// Layout file; the built-in map when absent.
        #[serde(default)]
        layout: Option<PathBuf>,
        #[serde(default = "default_maze_steps")]
        max_steps: usize,
    },
}

fn default_cartpole_steps() -> usize {
    cartpole::MAX_STEPS
}

fn default_maze_steps() -> usize {
    maze::MAX_STEPS
}

impl EnvConfig {
    pub fn cartpole() -> Self {
        EnvConfig::Cartpole {
            max_steps: cartpole::MAX_STEPS,
        }
    }

    pub fn maze() -> Self {
        EnvConfig::Maze {
            layout: None,
            max_steps: maze::MAX_STEPS,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::Cartpole { .. } => "cartpole",
            EnvConfig::Maze { .. } => "maze",
        }
    }

    pub fn build(&self) -> Result<Box<dyn Environment>> {
        Ok(match self {
            EnvConfig::Cartpole { max_steps } => Box::new(CartPole::new(*max_steps)),
            EnvConfig::Maze { layout, max_steps } => {
                let layout = match layout {
                    Some(p) => MazeLayout::load(p)?,
                    None => MazeLayout::default(),
                };
                Box::new(Maze::new(layout, *max_steps))
            }
        })
    }
}

/// Observations visited by uniformly random actions, resetting on episode end.
pub fn collect_random_observations(env: &mut dyn Environment, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    let mut obs = env.reset(rng.random());
    while rows.len() < n {
        rows.push(obs.clone());
        let step = env.step(rng.random_range(0..env.n_actions()))?;
        obs = if step.done() { env.reset(rng.random()) } else { step.observation };
    }
    Dataset::from_rows(vec![env.observation_dim()], &rows)
}
