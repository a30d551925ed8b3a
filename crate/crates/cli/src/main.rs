use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use latent_qrl::runner::{
    load_config, preset_config_with, preset_names, pretrain, report, run_ensemble, ExperimentConfig, RunOptions,
    ENV_PREFIX,
};

/// Latent-space hybrid quantum RL experiments.
#[derive(Parser, Debug)]
#[command(version, about, after_help = env_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn env_help() -> String {
    format!(
        "Config keys can be overridden with {ENV_PREFIX}<KEY> environment variables, nested keys joined by `__` \
         (e.g. {ENV_PREFIX}PPO__LR=0.001). Command-line flags take precedence over both."
    )
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML experiment config, or the manifest.json of an earlier run.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset; append `-full` for 20,000 pretraining epochs.
    #[arg(long)]
    preset: Option<String>,
    /// Base seed (agent i uses seed + i; also seeds pretraining).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => load_config(path).with_context(|| format!("loading {}", path.display()))?,
            (None, Some(name)) => preset_config_with(name, std::env::vars())?,
            (None, None) => bail!("pass --config PATH or --preset NAME (presets: {})", preset_names().join(", ")),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.pretrain.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the configured autoencoder on random-policy observations.
    PretrainAe {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        overwrite: bool,
    },
    /// Train an ensemble of agents.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Worker threads, one agent each.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        overwrite: bool,
    },
    /// Compare run directories by normalized AULC.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Directory for report.csv and plot files.
        #[arg(long, default_value = "report")]
        out: PathBuf,
        /// Threshold as a percentage of the optimum.
        #[arg(long)]
        percent: Option<f64>,
    },
    /// Print the resolved configuration as TOML.
    ShowConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::PretrainAe { cfg, overwrite } => {
            let out = cfg.out.clone();
            let cfg = cfg.resolve()?;
            let out = out.unwrap_or_else(|| {
                let mut p = cfg.out_dir.clone().into_os_string();
                p.push("-ae");
                p.into()
            });
            let done = pretrain(&cfg, &out, overwrite)?;
            println!(
                "{} (sha256 {}), final loss {:.6e}",
                done.checkpoint.path.display(),
                done.checkpoint.sha256,
                done.final_loss
            );
        }
        Command::Train {
            cfg,
            parallel,
            overwrite,
        } => {
            let cfg = cfg.resolve()?;
            let manifest = run_ensemble(&cfg, &RunOptions { parallel, overwrite })?;
            println!(
                "{}: {} agents in {:.1}s, config {}",
                cfg.out_dir.display(),
                manifest.agents.len(),
                manifest.wall_clock_secs,
                manifest.config_hash
            );
        }
        Command::Report { runs, out, percent } => {
            let r = report(&runs, &out, percent)?;
            println!("shared e_P = {}", r.comparison.e_p);
            for row in &r.comparison.rows {
                let own = row.own_e_p.map_or_else(|| "not reached".to_string(), |e| e.to_string());
                println!("{:>2}. {:<24} AULC {:.4}  own e_P {own}", row.rank, row.method, row.aulc);
            }
            println!("wrote {}", out.join("report.csv").display());
        }
        Command::ShowConfig { cfg } => {
            print!("{}", cfg.resolve()?.to_toml()?);
        }
    }
    Ok(())
}
