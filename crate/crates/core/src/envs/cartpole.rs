use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Environment, StepResult};
use crate::error::{Error, Result};

pub const GRAVITY: f64 = 9.8;
pub const CART_MASS: f64 = 1.0;
pub const POLE_MASS: f64 = 0.1;
/// Half the pole length.
pub const POLE_HALF_LENGTH: f64 = 0.5;
pub const FORCE: f64 = 10.0;
pub const TAU: f64 = 0.02;
pub const X_LIMIT: f64 = 2.4;
pub const THETA_LIMIT: f64 = 12.0 * 2.0 * std::f64::consts::PI / 360.0;
pub const MAX_STEPS: usize = 500;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CartPoleState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl CartPoleState {
    pub fn observation(&self) -> Vec<f64> {
        vec![self.x, self.x_dot, self.theta, self.theta_dot]
    }

    /// One explicit Euler step under a push left (0) or right (1).
    pub fn advance(&self, action: usize) -> CartPoleState {
        let force = if action == 1 { FORCE } else { -FORCE };
        let total = CART_MASS + POLE_MASS;
        let pml = POLE_MASS * POLE_HALF_LENGTH;
        let (sin, cos) = self.theta.sin_cos();
        let temp = (force + pml * self.theta_dot * self.theta_dot * sin) / total;
        let theta_acc =
            (GRAVITY * sin - cos * temp) / (POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / total));
        let x_acc = temp - pml * theta_acc * cos / total;
        CartPoleState {
            x: self.x + TAU * self.x_dot,
            x_dot: self.x_dot + TAU * x_acc,
            theta: self.theta + TAU * self.theta_dot,
            theta_dot: self.theta_dot + TAU * theta_acc,
        }
    }

    pub fn failed(&self) -> bool {
        self.x.abs() > X_LIMIT || self.theta.abs() > THETA_LIMIT
    }
}

/// Classic cart-pole balancing with +1 reward per step.
#[derive(Clone, Debug)]
pub struct CartPole {
    state: CartPoleState,
    steps: usize,
    max_steps: usize,
    done: bool,
}

impl Default for CartPole {
    fn default() -> Self {
        CartPole::new(MAX_STEPS)
    }
}

impl CartPole {
    pub fn new(max_steps: usize) -> Self {
        CartPole {
            state: CartPoleState::default(),
            steps: 0,
            max_steps,
            done: true,
        }
    }

    pub fn state(&self) -> CartPoleState {
        self.state
    }

    /// Starts an episode from an explicit state.
    pub fn reset_to(&mut self, state: CartPoleState) -> Vec<f64> {
        self.state = state;
        self.steps = 0;
        self.done = false;
        state.observation()
    }
}

impl Environment for CartPole {
    fn observation_dim(&self) -> usize {
        4
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = || rng.random_range(-0.05..=0.05);
        self.reset_to(CartPoleState {
            x: u(),
            x_dot: u(),
            theta: u(),
            theta_dot: u(),
        })
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        if action > 1 {
            return Err(Error::Env(format!("cart-pole action {action} is not 0 or 1")));
        }
        if self.done {
            return Err(Error::Env("step after episode end; call reset".into()));
        }
        self.state = self.state.advance(action);
        self.steps += 1;
        let terminated = self.state.failed();
        let truncated = !terminated && self.steps >= self.max_steps;
        self.done = terminated || truncated;
        Ok(StepResult {
            observation: self.state.observation(),
            reward: 1.0,
            terminated,
            truncated,
            info: Default::default(),
        })
    }

    fn episode_optimum(&self) -> f64 {
        self.max_steps as f64
    }

    fn mean_optimum(&self) -> f64 {
        self.max_steps as f64
    }
}
