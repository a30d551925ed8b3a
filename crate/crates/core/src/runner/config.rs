//! Experiment configuration: TOML files layered over named presets, with
//! `LQRL_`-prefixed environment overrides.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::envs::EnvConfig;
use crate::error::{Error, Result};
use crate::metrics::{AulcOptions, EpBasis, DEFAULT_KEEP};
use crate::nets::{cnn_hidden_for_budget, cnn_policy, AeConfig, ConvArch, CriticConfig, CriticInput, PiecewiseConstant};
use crate::photonic::{CvCircuit, CvPolicyConfig, CvPrep, GateBackend, GradientMethod};
use crate::ppo::{Agent, PolicyNet, PpoHyper, TrainMode};
use crate::qubit::{QubitPolicyConfig, QubitPrep};

/// Prefix of environment variables that override config keys. Nested keys
/// are joined with `__`, so `LQRL_PPO__LR=0.001` sets `ppo.lr`.
pub const ENV_PREFIX: &str = "LQRL_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Platform {
    Qubit,
    Qumode,
    ClassicalCnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AeVariant {
    SmallDense,
    LargeDense,
    Conv,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Start {
    /// Autoencoder initialized from `ae_checkpoint`.
    Hot,
    #[default]
    Cold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QubitSection {
    pub reupload: bool,
    pub prep: QubitPrep,
    pub blocks_per_layer: usize,
}

impl Default for QubitSection {
    fn default() -> Self {
        QubitSection {
            reupload: false,
            prep: QubitPrep::default(),
            blocks_per_layer: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhotonicSection {
    pub cutoff: usize,
    pub reupload: bool,
    pub prep: CvPrep,
    pub trunc_tolerance: f64,
    pub gradient: GradientMethod,
    pub backend: GateBackend,
}

impl Default for PhotonicSection {
    fn default() -> Self {
        let cv = CvPolicyConfig::new(2, 1, 10, 2);
        PhotonicSection {
            cutoff: cv.cutoff,
            reupload: cv.reupload,
            prep: cv.prep,
            trunc_tolerance: cv.trunc_tolerance,
            gradient: cv.gradient,
            backend: cv.backend,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnSection {
    /// Hidden width; derived from `param_budget` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    pub param_budget: usize,
}

impl Default for CnnSection {
    fn default() -> Self {
        CnnSection {
            hidden: None,
            param_budget: 556,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    /// Random-policy observations collected for the dataset.
    pub samples: usize,
    pub epochs: usize,
    /// Defaults to 16 for dense and 32 for convolutional autoencoders.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    pub schedule: PiecewiseConstant,
    pub seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            samples: 10_000,
            epochs: 2_000,
            batch_size: None,
            schedule: PiecewiseConstant::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Threshold as a percentage of the environment optimum.
    pub percent: f64,
    /// Trailing smoothing window in episodes.
    pub window: usize,
    pub basis: EpBasis,
    /// Agents kept per ensemble, ranked by final smoothed reward.
    pub keep: usize,
}

impl Default for ReportSection {
    fn default() -> Self {
        let a = AulcOptions::default();
        ReportSection {
            percent: a.percent,
            window: a.window,
            basis: a.basis,
            keep: DEFAULT_KEEP,
        }
    }
}

impl ReportSection {
    pub fn aulc_options(&self) -> AulcOptions {
        AulcOptions {
            percent: self.percent,
            window: self.window,
            basis: self.basis,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Method label used in reports.
    pub name: String,
    pub environment: EnvConfig,
    pub platform: Platform,
    pub layers: usize,
    /// Fixed by environment and platform; checked when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    /// Defaults to large-dense on CartPole and conv on the maze.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub autoencoder: Option<AeVariant>,
    #[serde(default)]
    pub conv_arch: ConvArch,
    pub mode: TrainMode,
    #[serde(default)]
    pub start: Start,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ae_checkpoint: Option<PathBuf>,
    #[serde(default = "default_ensemble")]
    pub ensemble: usize,
    pub episodes: usize,
    /// Agent `i` uses seed `seed + i`.
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default = "default_true")]
    pub detach_critic: bool,
    #[serde(default)]
    pub critic: CriticConfig,
    #[serde(default)]
    pub ppo: PpoHyper,
    #[serde(default)]
    pub qubit: QubitSection,
    #[serde(default)]
    pub photonic: PhotonicSection,
    #[serde(default)]
    pub cnn: CnnSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub report: ReportSection,
}

fn default_ensemble() -> usize {
    8
}

fn default_true() -> bool {
    true
}

const CARTPOLE_QUBIT: &str = r#"
name = "cartpole-qubit"
platform = "qubit"
layers = 3
autoencoder = "large-dense"
mode = "joint"
episodes = 3000
out_dir = "runs/cartpole-qubit"
environment = { kind = "cartpole" }
critic = { input = "raw" }
ppo = { c_ae = 0.1 }
"#;

const MAZE_QUBIT: &str = r#"
name = "maze-qubit"
platform = "qubit"
layers = 3
autoencoder = "conv"
mode = "joint"
episodes = 5000
out_dir = "runs/maze-qubit"
environment = { kind = "maze" }
"#;

const CARTPOLE_QUMODE: &str = r#"
name = "cartpole-qumode"
platform = "qumode"
layers = 1
autoencoder = "large-dense"
mode = "joint"
episodes = 3000
out_dir = "runs/cartpole-qumode"
environment = { kind = "cartpole" }
critic = { input = "raw" }
ppo = { c_ae = 0.1 }
photonic = { cutoff = 10 }
"#;

const MAZE_QUMODE: &str = r#"
name = "maze-qumode"
platform = "qumode"
layers = 1
autoencoder = "conv"
mode = "joint"
episodes = 5000
out_dir = "runs/maze-qumode"
environment = { kind = "maze" }
photonic = { cutoff = 4, trunc_tolerance = 0.05 }
"#;

const MAZE_CLASSICAL: &str = r#"
name = "maze-classical"
platform = "classical-cnn"
layers = 0
mode = "classical"
episodes = 5000
out_dir = "runs/maze-classical"
environment = { kind = "maze" }
critic = { input = "raw" }
cnn = { param_budget = 556 }
"#;

/// Suffix selecting the full-length variant of a preset (20,000 autoencoder
/// pretraining epochs instead of 2,000).
pub const FULL_SUFFIX: &str = "-full";

pub fn preset_names() -> Vec<&'static str> {
    vec!["cartpole-qubit", "maze-qubit", "cartpole-qumode", "maze-qumode", "maze-classical"]
}

/// The key/value tree of a named preset.
pub fn preset_table(name: &str) -> Result<Table> {
    let (base, full) = match name.strip_suffix(FULL_SUFFIX) {
        Some(b) => (b, true),
        None => (name, false),
    };
    let text = match base {
        "cartpole-qubit" => CARTPOLE_QUBIT,
        "maze-qubit" => MAZE_QUBIT,
        "cartpole-qumode" => CARTPOLE_QUMODE,
        "maze-qumode" => MAZE_QUMODE,
        "maze-classical" => MAZE_CLASSICAL,
        _ => {
            return Err(Error::ConfigKey {
                key: "preset".into(),
                reason: format!("unknown preset `{name}`; known: {}", preset_names().join(", ")),
            })
        }
    };
    let mut t: Table = text.parse().expect("built-in presets parse");
    if full {
        let mut pre = Table::new();
        pre.insert("epochs".into(), Value::Integer(20_000));
        merge(&mut t, Table::from_iter([("pretrain".to_string(), Value::Table(pre))]));
        t.insert("name".into(), Value::String(name.to_string()));
    }
    Ok(t)
}

/// Recursively overlays `over` onto `base`; tables merge, other values replace.
pub fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies `LQRL_*` variables from `vars` onto `table`. Values are parsed as
/// TOML literals and fall back to plain strings.
pub fn apply_env_overrides(table: &mut Table, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let mut pairs: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    pairs.sort();
    for (key, raw) in pairs {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(|s| s.to_ascii_lowercase()).collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(Error::ConfigKey {
                key,
                reason: "empty path segment".into(),
            });
        }
        let value = parse_literal(&raw);
        let mut over = Table::new();
        let (last, parents) = path.split_last().expect("non-empty path");
        over.insert(last.clone(), value);
        for p in parents.iter().rev() {
            over = Table::from_iter([(p.clone(), Value::Table(over))]);
        }
        merge(table, over);
    }
    Ok(())
}

fn parse_literal(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Resolves a key/value tree: an optional `preset` key is expanded first and
/// the remaining keys are layered over it.
pub fn config_from_table(mut table: Table, origin: &Path) -> Result<ExperimentConfig> {
    let mut resolved = match table.remove("preset") {
        Some(Value::String(name)) => preset_table(&name)?,
        Some(other) => {
            return Err(Error::ConfigKey {
                key: "preset".into(),
                reason: format!("expected a string, found {}", other.type_str()),
            })
        }
        None => Table::new(),
    };
    merge(&mut resolved, table);
    let cfg: ExperimentConfig = resolved.try_into().map_err(|e: toml::de::Error| Error::Parse {
        path: origin.to_path_buf(),
        reason: e.message().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a TOML config (or the config snapshot inside a run manifest) and
/// applies environment overrides from `vars`.
pub fn load_config_with(path: &Path, vars: impl IntoIterator<Item = (String, String)>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut table = if path.extension().is_some_and(|e| e == "json") {
        let manifest: super::Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        manifest.config_toml.parse::<Table>().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.message().to_string(),
        })?
    } else {
        text.parse::<Table>().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.message().to_string(),
        })?
    };
    apply_env_overrides(&mut table, vars)?;
    config_from_table(table, path)
}

/// [`load_config_with`] over the process environment.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    load_config_with(path, std::env::vars())
}

/// A preset with environment overrides from `vars`.
pub fn preset_config_with(name: &str, vars: impl IntoIterator<Item = (String, String)>) -> Result<ExperimentConfig> {
    let mut table = Table::from_iter([("preset".to_string(), Value::String(name.to_string()))]);
    apply_env_overrides(&mut table, vars)?;
    config_from_table(table, Path::new(name))
}

fn key_err(key: &str, reason: impl Into<String>) -> Error {
    Error::ConfigKey {
        key: key.to_string(),
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        preset_config_with(name, std::iter::empty())
    }

    /// Latent width fixed by environment and platform; `None` for the
    /// classical CNN, which has no autoencoder.
    pub fn table_latent_dim(&self) -> Option<usize> {
        match (&self.environment, self.platform) {
            (_, Platform::ClassicalCnn) => None,
            (EnvConfig::Cartpole { .. }, _) => Some(2),
            (EnvConfig::Maze { .. }, Platform::Qubit) => Some(8),
            (EnvConfig::Maze { .. }, Platform::Qumode) => Some(6),
        }
    }

    pub fn ae_variant(&self) -> Option<AeVariant> {
        match (self.platform, self.autoencoder, &self.environment) {
            (Platform::ClassicalCnn, _, _) => None,
            (_, Some(v), _) => Some(v),
            (_, None, EnvConfig::Cartpole { .. }) => Some(AeVariant::LargeDense),
            (_, None, EnvConfig::Maze { .. }) => Some(AeVariant::Conv),
        }
    }

    pub fn n_actions(&self) -> usize {
        match self.environment {
            EnvConfig::Cartpole { .. } => 2,
            EnvConfig::Maze { .. } => 4,
        }
    }

    pub fn observation_dim(&self) -> usize {
        match self.environment {
            EnvConfig::Cartpole { .. } => 4,
            EnvConfig::Maze { .. } => crate::envs::maze::SIDE * crate::envs::maze::SIDE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() || self.name.contains(['/', '\\']) {
            return Err(key_err("name", "must be non-empty and contain no path separators"));
        }
        let env = self.environment.name();
        if let (Some(want), Some(got)) = (self.table_latent_dim(), self.latent_dim) {
            if want != got {
                return Err(key_err(
                    "latent_dim",
                    format!("{env} on {:?} uses latent dimension {want}, got {got}", self.platform),
                ));
            }
        }
        if self.platform == Platform::ClassicalCnn && self.latent_dim.is_some() {
            return Err(key_err("latent_dim", "the classical CNN has no latent space"));
        }
        let classical = self.platform == Platform::ClassicalCnn;
        if classical != (self.mode == TrainMode::Classical) {
            return Err(key_err("mode", "classical mode goes with the classical-cnn platform and nothing else"));
        }
        if classical {
            if !matches!(self.environment, EnvConfig::Maze { .. }) {
                return Err(key_err("mode", "classical mode is only defined on the maze"));
            }
            if self.critic.input != CriticInput::Raw {
                return Err(key_err("critic.input", "the classical agent has no latent space; use raw"));
            }
            if self.autoencoder.is_some() {
                return Err(key_err("autoencoder", "the classical agent has no autoencoder"));
            }
        } else {
            if self.layers == 0 {
                return Err(key_err("layers", "quantum policies need at least one layer"));
            }
            match (self.ae_variant(), &self.environment) {
                (Some(AeVariant::Conv), EnvConfig::Maze { .. })
                | (Some(AeVariant::SmallDense | AeVariant::LargeDense), EnvConfig::Cartpole { .. }) => {}
                (v, _) => return Err(key_err("autoencoder", format!("{v:?} does not fit {env} observations"))),
            }
        }
        let needs_ckpt = self.start == Start::Hot || self.mode == TrainMode::FixedAe;
        if needs_ckpt && self.ae_checkpoint.is_none() {
            return Err(key_err("ae_checkpoint", "hot start and fixed-ae mode need a pretrained autoencoder"));
        }
        if self.mode == TrainMode::FixedAe && self.start == Start::Cold {
            return Err(key_err("start", "fixed-ae mode trains on a pretrained autoencoder; use hot"));
        }
        if classical && self.start == Start::Hot {
            return Err(key_err("start", "the classical agent has no autoencoder to warm-start"));
        }
        if self.ensemble == 0 {
            return Err(key_err("ensemble", "must be positive"));
        }
        if self.episodes == 0 {
            return Err(key_err("episodes", "must be positive"));
        }
        if self.pretrain.samples == 0 {
            return Err(key_err("pretrain.samples", "must be positive"));
        }
        if self.report.keep == 0 || self.report.window == 0 {
            return Err(key_err("report", "keep and window must be positive"));
        }
        if !(self.report.percent > 0.0 && self.report.percent <= 100.0) {
            return Err(key_err("report.percent", format!("{} outside (0, 100]", self.report.percent)));
        }
        self.pretrain.schedule.validate().map_err(|e| key_err("pretrain.schedule", e.to_string()))?;
        self.ppo.validate().map_err(|e| key_err("ppo", e.to_string()))?;
        self.build_agent().map(|_| ())
    }

    pub fn ae_config(&self) -> Option<AeConfig> {
        let obs = self.observation_dim();
        self.ae_variant().map(|v| match v {
            AeVariant::SmallDense => AeConfig::small_dense(obs),
            AeVariant::LargeDense => AeConfig::large_dense(obs),
            AeVariant::Conv => AeConfig::Conv {
                latent_dim: self.table_latent_dim().unwrap_or(8),
                arch: self.conv_arch,
            },
        })
    }

    pub fn qubit_config(&self) -> QubitPolicyConfig {
        QubitPolicyConfig {
            reupload: self.qubit.reupload,
            prep: self.qubit.prep,
            blocks_per_layer: self.qubit.blocks_per_layer,
            ..QubitPolicyConfig::new(self.table_latent_dim().unwrap_or(0), self.layers, self.n_actions())
        }
    }

    pub fn photonic_config(&self) -> CvPolicyConfig {
        let p = &self.photonic;
        CvPolicyConfig {
            reupload: p.reupload,
            prep: p.prep,
            trunc_tolerance: p.trunc_tolerance,
            gradient: p.gradient,
            backend: p.backend,
            ..CvPolicyConfig::new(self.table_latent_dim().unwrap_or(0), self.layers, p.cutoff, self.n_actions())
        }
    }

    pub fn cnn_hidden(&self) -> Result<usize> {
        match self.cnn.hidden {
            Some(h) => Ok(h),
            None => cnn_hidden_for_budget(self.cnn.param_budget, self.n_actions()),
        }
    }

    /// Builds the agent described by this config.
    pub fn build_agent(&self) -> Result<Agent> {
        let ae = self.ae_config().map(|c| c.build()).transpose()?;
        let policy = match self.platform {
            Platform::Qubit => PolicyNet::Qubit(self.qubit_config()),
            Platform::Qumode => PolicyNet::Photonic(Arc::new(CvCircuit::new(self.photonic_config())?)),
            Platform::ClassicalCnn => PolicyNet::Cnn {
                net: cnn_policy(self.cnn_hidden()?, self.n_actions())?,
                n_actions: self.n_actions(),
            },
        };
        let critic_dim = match (self.critic.input, &ae) {
            (CriticInput::Latent, Some(ae)) => ae.latent_dim(),
            _ => self.observation_dim(),
        };
        let critic = self.critic.build(critic_dim)?;
        Agent::new(ae, policy, critic, self.critic.input, self.detach_critic, self.mode)
    }

    /// The resolved config as TOML; loading it back yields an equal config.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}
