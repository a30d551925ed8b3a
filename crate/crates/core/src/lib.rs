//! Hybrid quantum-classical reinforcement learning in latent observation spaces.
//!
//! A classical autoencoder compresses environment observations into a small
//! latent vector that is embedded into a parametrized quantum circuit acting as
//! the PPO policy. Autoencoder, circuit and critic parameters are optimized
//! together on the combined loss `L = L_ppo + c_ae * L_ae` by a single
//! optimizer.
//!
//! Module map:
//!
//! - [`grad`]: define-by-run reverse-mode differentiation over dense `f64` tensors.
//! - [`qubit`]: state-vector simulator and strongly entangling policy circuit.
//! - [`photonic`]: truncated Fock-space simulator and CV-QNN policy circuit.
//! - [`nets`]: autoencoders, critic and the classical CNN baseline.
//! - [`envs`]: cart-pole and the 48x48 visual maze.
//! - [`ppo`]: rollouts, GAE, the clipped surrogate and the joint update.
//! - [`metrics`]: smoothing, ensemble selection and normalized AULC.
//! - [`runner`]: experiment configs, ensembles, persistence and reports.

pub mod envs;
pub mod error;
pub mod grad;
pub mod metrics;
pub mod nets;
pub mod photonic;
pub mod ppo;
pub mod qubit;
pub mod runner;

pub use error::{Error, Result};
