//! Experiment orchestration: autoencoder pretraining, ensemble training and
//! reporting, all driven by an [`ExperimentConfig`].
//!
//! A run directory holds `config.toml`, `manifest.json` and per agent
//! `agent-NN.csv` (learning curve), `agent-NN-loss.csv` and
//! `agent-NN-params.json`. Workers write only their own agent files; the
//! manifest is written last by the orchestrator.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::collect_random_observations;
use crate::error::{Error, Result};
use crate::grad::ParamSet;
use crate::metrics::{
    compare_methods, comparison_csv, normalized_aulc, plot_csv, read_curve, select_ensemble, smooth, write_curve,
    AulcReport, Comparison, LearningCurve,
};
use crate::nets::{pretrain_from, write_loss_history, PretrainOptions};
use crate::ppo::{train_agent, write_update_log};

mod config;
pub mod io;

pub use config::{
    apply_env_overrides, config_from_table, load_config, load_config_with, merge, preset_config_with, preset_names,
    preset_table, AeVariant, CnnSection, ExperimentConfig, PhotonicSection, Platform, PretrainSection, QubitSection,
    ReportSection, Start, ENV_PREFIX, FULL_SUFFIX,
};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const AE_CHECKPOINT: &str = "ae.json";
pub const DATASET: &str = "dataset.bin";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the run directory, except for external inputs.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub index: usize,
    pub seed: u64,
    pub curve: FileRecord,
    pub loss: FileRecord,
    pub params: FileRecord,
    pub episodes: usize,
    pub truncation_warnings: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub name: String,
    pub environment: String,
    /// Reward the report normalizes against.
    pub optimum: f64,
    /// SHA-256 of `config_toml`.
    pub config_hash: String,
    /// Resolved configuration; loading it reproduces the run.
    pub config_toml: String,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub ae_checkpoint: Option<FileRecord>,
    pub agents: Vec<AgentRecord>,
    pub wall_clock_secs: f64,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path,
            reason: e.to_string(),
        })
    }

    pub fn config(&self, dir: &Path) -> Result<ExperimentConfig> {
        let table = self.config_toml.parse().map_err(|e: toml::de::Error| Error::Parse {
            path: dir.join(MANIFEST),
            reason: e.message().to_string(),
        })?;
        config_from_table(table, &dir.join(MANIFEST))
    }
}

/// Creates `dir`, replacing an earlier run or pretraining output only when
/// `overwrite` is set. Directories that hold anything else are never removed.
fn prepare_output(dir: &Path, overwrite: bool, marker: &str) -> Result<()> {
    if dir.exists() {
        if !overwrite {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
        let empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_none();
        if !empty && !dir.join(marker).exists() {
            return Err(Error::Config(format!(
                "refusing to overwrite {}: it has no {marker}",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Files written by [`pretrain`].
#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub dir: PathBuf,
    pub checkpoint: FileRecord,
    pub final_loss: f64,
}

/// Collects random-policy observations, trains the configured autoencoder
/// on them and writes `dataset.bin`, `ae.json` and `ae-loss.csv` into `out`.
pub fn pretrain(cfg: &ExperimentConfig, out: &Path, overwrite: bool) -> Result<PretrainOutcome> {
    let ae_cfg = cfg
        .ae_config()
        .ok_or_else(|| Error::Config("the classical agent has no autoencoder to pretrain".into()))?;
    prepare_output(out, overwrite, AE_CHECKPOINT)?;
    let mut env = cfg.environment.build()?;
    let p = &cfg.pretrain;
    let data = collect_random_observations(env.as_mut(), p.samples, p.seed)?;
    data.save(&out.join(DATASET))?;
    let ae = ae_cfg.build()?;
    let init = ae.init(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(p.seed));
    let opts = PretrainOptions {
        epochs: p.epochs,
        batch_size: p.batch_size,
        schedule: p.schedule.clone(),
    };
    let every = (p.epochs / 20).max(1);
    let trained = pretrain_from(&ae, init, &data, &opts, p.seed, |epoch, loss| {
        if epoch % every == 0 {
            log::info!("pretrain epoch {epoch}: loss {loss:.6e}");
        }
    })?;
    let ckpt = out.join(AE_CHECKPOINT);
    trained.params.save(&ckpt)?;
    write_loss_history(&out.join("ae-loss.csv"), &trained.losses)?;
    Ok(PretrainOutcome {
        dir: out.to_path_buf(),
        checkpoint: FileRecord {
            sha256: file_hash(&ckpt)?,
            path: ckpt,
        },
        final_loss: trained.losses.last().copied().unwrap_or(f64::NAN),
    })
}

/// Copies encoder and decoder weights from `ckpt` over `params`.
fn warm_start(params: &mut ParamSet, ckpt: &ParamSet, path: &Path) -> Result<()> {
    let mut loaded = 0;
    for group in ["encoder", "decoder"] {
        for (name, t) in ckpt.subset(group).iter() {
            match params.get_mut(name) {
                Some(slot) if slot.shape() == t.shape() => {
                    *slot = t.clone();
                    loaded += 1;
                }
                _ => {
                    return Err(Error::ConfigKey {
                        key: "ae_checkpoint".into(),
                        reason: format!("{} holds {name} {:?}, which the agent does not have", path.display(), t.shape()),
                    })
                }
            }
        }
    }
    let expected = params.names().filter(|n| n.starts_with("encoder.") || n.starts_with("decoder.")).count();
    if loaded != expected {
        return Err(Error::ConfigKey {
            key: "ae_checkpoint".into(),
            reason: format!("{} covers {loaded} of {expected} autoencoder tensors", path.display()),
        });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Worker threads; agents beyond this count queue.
    pub parallel: usize,
    pub overwrite: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            parallel: 1,
            overwrite: false,
        }
    }
}

fn agent_file(i: usize, suffix: &str) -> PathBuf {
    PathBuf::from(format!("agent-{i:02}{suffix}"))
}

/// Trains `cfg.ensemble` agents with seeds `cfg.seed + i` and writes the run
/// directory `cfg.out_dir`.
pub fn run_ensemble(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Manifest> {
    cfg.validate()?;
    let started = Instant::now();
    let agent = cfg.build_agent()?;
    let ae_ckpt = match (&cfg.ae_checkpoint, cfg.start == Start::Hot || agent.mode == crate::ppo::TrainMode::FixedAe) {
        (Some(path), true) => {
            let params = ParamSet::load(path)?;
            Some((params, FileRecord {
                path: path.clone(),
                sha256: file_hash(path)?,
            }))
        }
        _ => None,
    };
    let dir = cfg.out_dir.clone();
    prepare_output(&dir, opts.overwrite, MANIFEST)?;
    let optimum = cfg.environment.build()?.mean_optimum();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.parallel.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let agents: Vec<AgentRecord> = pool.install(|| {
        (0..cfg.ensemble)
            .into_par_iter()
            .map(|i| -> Result<AgentRecord> {
                let seed = cfg.seed.wrapping_add(i as u64);
                let mut params = agent.init_params(seed);
                if let (Some((ckpt, rec)), Some(_)) = (&ae_ckpt, &agent.ae) {
                    warm_start(&mut params, ckpt, &rec.path)?;
                }
                let mut env = cfg.environment.build()?;
                let out = train_agent(&agent, params, env.as_mut(), &cfg.ppo, cfg.episodes, seed, |_, _| {})?;
                let record = |suffix: &str| -> Result<FileRecord> {
                    let rel = agent_file(i, suffix);
                    Ok(FileRecord {
                        sha256: file_hash(&dir.join(&rel))?,
                        path: rel,
                    })
                };
                write_curve(&dir.join(agent_file(i, ".csv")), &out.returns)?;
                write_update_log(&dir.join(agent_file(i, "-loss.csv")), &out.updates)?;
                out.params.save(&dir.join(agent_file(i, "-params.json")))?;
                let tail = smooth(&out.returns, cfg.report.window)?;
                log::info!(
                    "{} agent {i} (seed {seed}): final smoothed reward {:.2}",
                    cfg.name,
                    tail.last().copied().unwrap_or(0.0)
                );
                Ok(AgentRecord {
                    index: i,
                    seed,
                    curve: record(".csv")?,
                    loss: record("-loss.csv")?,
                    params: record("-params.json")?,
                    episodes: out.returns.len(),
                    truncation_warnings: out.truncation_warned.iter().filter(|&&w| w).count(),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let config_toml = cfg.to_toml()?;
    io::write_atomic(&dir.join(CONFIG_SNAPSHOT), config_toml.as_bytes())?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        name: cfg.name.clone(),
        environment: cfg.environment.name().to_string(),
        optimum,
        config_hash: sha256_hex(config_toml.as_bytes()),
        config_toml,
        seeds: agents.iter().map(|a| a.seed).collect(),
        ae_checkpoint: ae_ckpt.map(|(_, r)| r),
        agents,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    io::write_atomic(&dir.join(MANIFEST), text.as_bytes())?;
    Ok(manifest)
}

/// Learning curves of a finished run.
pub fn load_curves(dir: &Path, manifest: &Manifest) -> Result<Vec<LearningCurve>> {
    manifest
        .agents
        .iter()
        .map(|a| {
            Ok(LearningCurve {
                seed: a.seed,
                config_hash: manifest.config_hash.clone(),
                rewards: read_curve(&dir.join(&a.curve.path))?,
            })
        })
        .collect()
}

/// One method's ensemble after selection.
#[derive(Clone, Debug)]
pub struct MethodReport {
    pub name: String,
    pub kept_seeds: Vec<u64>,
    pub aulc: AulcReport,
}

#[derive(Clone, Debug)]
pub struct ReportOutcome {
    pub methods: Vec<MethodReport>,
    pub comparison: Comparison,
}

/// Scores run directories grouped by method name and writes `report.csv`
/// plus `plot-<method>.csv` into `out`. `percent` overrides the configured
/// threshold.
pub fn report(run_dirs: &[PathBuf], out: &Path, percent: Option<f64>) -> Result<ReportOutcome> {
    if run_dirs.is_empty() {
        return Err(Error::Metrics("report needs at least one run directory".into()));
    }
    let mut methods: BTreeMap<String, (ReportSection, Vec<LearningCurve>)> = BTreeMap::new();
    let mut env: Option<(String, f64)> = None;
    for dir in run_dirs {
        let m = Manifest::load(dir)?;
        match &env {
            None => env = Some((m.environment.clone(), m.optimum)),
            Some((name, opt)) if *name != m.environment || *opt != m.optimum => {
                return Err(Error::Metrics(format!(
                    "{} is a {} run (optimum {}), earlier runs are {name} (optimum {opt})",
                    dir.display(),
                    m.environment,
                    m.optimum
                )))
            }
            Some(_) => {}
        }
        let cfg = m.config(dir)?;
        let curves = load_curves(dir, &m)?;
        let entry = methods.entry(m.name.clone()).or_insert_with(|| (cfg.report.clone(), Vec::new()));
        entry.1.extend(curves);
    }
    let (_, optimum) = env.expect("at least one run");
    let mut reports = Vec::new();
    let mut named = Vec::new();
    for (name, (section, curves)) in methods {
        let mut opts = section.aulc_options();
        if let Some(p) = percent {
            opts.percent = p;
        }
        let kept: Vec<LearningCurve> = if curves.len() > section.keep {
            select_ensemble(&curves, section.keep, opts.window)?
                .into_iter()
                .map(|i| curves[i].clone())
                .collect()
        } else {
            curves
        };
        let aulc = normalized_aulc(&kept, optimum, &opts)?;
        named.push((name.clone(), aulc.clone()));
        reports.push(MethodReport {
            name,
            kept_seeds: kept.iter().map(|c| c.seed).collect(),
            aulc,
        });
    }
    let comparison = compare_methods(&named)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    io::write_atomic(&out.join("report.csv"), &comparison_csv(&comparison)?)?;
    for r in &reports {
        io::write_atomic(&out.join(format!("plot-{}.csv", r.name)), &plot_csv(&r.aulc)?)?;
    }
    Ok(ReportOutcome {
        methods: reports,
        comparison,
    })
}
