//! Command-line surface. Flags override values from `--config`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use performa::FinetuneScope;

use crate::config::{ConfigError, ExperimentConfig, SwitchAt};

#[derive(Debug, Parser)]
#[command(
    name = "performa",
    version,
    about = "Performativity-aware prediction under label shift"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a sweep over strategies and seeds.
    Simulate(RunArgs),
    /// Print the adversarial tau that produces the target accuracy drop.
    Calibrate(CommonArgs),
    /// Rank candidate backbones by anticipated post-deployment accuracy.
    Rank(RankArgs),
    /// Run a sweep with a backbone switch schedule.
    Switch(SwitchArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub target_drop: Option<f64>,
    /// Master seed.
    #[arg(long, env = "PERFORMA_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Strategies to run; repeat or separate with commas.
    #[arg(long, value_delimiter = ',')]
    pub strategy: Vec<String>,
    #[arg(long)]
    pub ft_epochs: Option<usize>,
    #[arg(long, value_parser = parse_scope)]
    pub ft_scope: Option<FinetuneScope>,
    /// Hidden widths, e.g. `256,256`.
    #[arg(long, value_delimiter = ',')]
    pub adapter_hidden: Vec<usize>,
    #[arg(long)]
    pub adapter_lr: Option<f64>,
    #[arg(long)]
    pub buffer_decay: Option<f64>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub num_seeds: Option<usize>,
    /// Rerun the configuration recorded in a manifest.
    #[arg(long, conflicts_with = "config")]
    pub manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RankArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Adapter snapshot written by `simulate`.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Candidate backbone ids; repeat or separate with commas.
    #[arg(long, value_delimiter = ',')]
    pub candidate: Vec<String>,
    /// Skip the simulated post-deployment column.
    #[arg(long)]
    pub no_simulate: bool,
    /// Emit JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SwitchArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// `ROUND:BACKBONE` pairs, e.g. `60:mid,120:best`.
    #[arg(long = "at", value_delimiter = ',', value_parser = parse_switch)]
    pub at: Vec<SwitchAt>,
    /// Keep the adapter fixed.
    #[arg(long)]
    pub freeze_adapter: bool,
    /// Adapter snapshot to start from.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
}

fn parse_scope(s: &str) -> Result<FinetuneScope, String> {
    match s {
        "all" => Ok(FinetuneScope::All),
        "last_bias_only" | "last-bias-only" | "bias" => Ok(FinetuneScope::LastBiasOnly),
        _ => Err(format!("expected `all` or `last_bias_only`, got `{s}`")),
    }
}

fn parse_switch(s: &str) -> Result<SwitchAt, String> {
    let (round, backbone) = s
        .split_once(':')
        .ok_or_else(|| format!("expected ROUND:BACKBONE, got `{s}`"))?;
    Ok(SwitchAt {
        round: round
            .trim()
            .parse()
            .map_err(|e| format!("bad round in `{s}`: {e}"))?,
        backbone: backbone.trim().to_string(),
    })
}

fn base_config(common: &CommonArgs) -> Result<ExperimentConfig, ConfigError> {
    match &common.config {
        Some(path) => ExperimentConfig::from_path(path),
        None => Ok(ExperimentConfig::default()),
    }
}

fn apply_common(config: &mut ExperimentConfig, common: &CommonArgs) -> Result<(), ConfigError> {
    if common.tau.is_some() && common.target_drop.is_some() {
        return Err(ConfigError::ConflictingShift);
    }
    if let Some(t) = common.tau {
        config.tau = Some(t);
        config.target_drop = None;
    }
    if let Some(d) = common.target_drop {
        config.target_drop = Some(d);
        config.tau = None;
    }
    if let Some(s) = common.seed {
        config.seed = s;
    }
    Ok(())
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig, ConfigError> {
        let mut config = base_config(self)?;
        apply_common(&mut config, self)?;
        config.validate()?;
        Ok(config)
    }
}

impl RunArgs {
    /// The file configuration (or a manifest's) with flags applied on top.
    pub fn resolve(&self) -> Result<ExperimentConfig, ConfigError> {
        let mut config = match &self.manifest {
            Some(path) => {
                crate::run::RunManifest::load(path)
                    .map_err(|e| match e {
                        crate::run::RunError::Config(c) => c,
                        other => ConfigError::Invalid(other.to_string()),
                    })?
                    .config
            }
            None => base_config(&self.common)?,
        };
        apply_common(&mut config, &self.common)?;
        if !self.strategy.is_empty() {
            config.strategies = self.strategy.clone();
        }
        if let Some(v) = self.ft_epochs {
            config.ft_epochs = v;
        }
        if let Some(v) = self.ft_scope {
            config.ft_scope = v;
        }
        if !self.adapter_hidden.is_empty() {
            config.adapter_hidden = self.adapter_hidden.clone();
        }
        if let Some(v) = self.adapter_lr {
            config.adapter_lr = v;
        }
        if let Some(v) = self.buffer_decay {
            config.buffer_decay = v;
        }
        if let Some(v) = self.rounds {
            config.rounds = v;
        }
        if let Some(v) = self.num_seeds {
            config.num_seeds = v;
        }
        config.validate()?;
        Ok(config)
    }
}

impl RankArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig, ConfigError> {
        let mut config = base_config(&self.common)?;
        apply_common(&mut config, &self.common)?;
        if self.adapter.is_some() {
            config.adapter_snapshot = self.adapter.clone();
        }
        if !self.candidate.is_empty() {
            config.candidates = self.candidate.clone();
        }
        if self.no_simulate {
            config.rank_simulate = false;
        }
        config.validate()?;
        Ok(config)
    }
}

impl SwitchArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig, ConfigError> {
        let mut config = self.run.resolve()?;
        if !self.at.is_empty() {
            config.switch_schedule = self.at.clone();
        }
        if self.freeze_adapter {
            config.freeze_adapter = true;
        }
        if self.adapter.is_some() {
            config.adapter_snapshot = self.adapter.clone();
        }
        if config.switch_schedule.is_empty() {
            return Err(ConfigError::Invalid(
                "switch needs a non-empty schedule".into(),
            ));
        }
        config.validate()?;
        Ok(config)
    }
}
