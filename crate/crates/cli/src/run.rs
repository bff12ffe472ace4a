//! Sweep execution, summaries and manifests.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use performa::trajectory::{mean_accuracy, run_trajectory_with_state, write_csv};
use performa::{AdapterNet, TrajectoryConfig, TrajectoryRecord};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ExperimentConfig, Resolved};

pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Rounds at the end of a trajectory over which adapter KL is averaged.
pub const KL_TAIL: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] performa::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{strategy} seed {seed} failed after {completed} rounds (partial log in {partial}): {source}")]
    Trajectory {
        strategy: String,
        seed: u64,
        completed: usize,
        partial: PathBuf,
        source: performa::Error,
    },
}

impl RunError {
    /// Process exit code: 1 for configuration problems, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), RunError> {
    std::fs::write(path, contents).map_err(io_err(path))
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Everything needed to reproduce a run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub tau: f64,
    /// Output files, relative to the manifest's directory.
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let manifest: Self = serde_json::from_str(&text).map_err(ConfigError::from)?;
        manifest.config.validate()?;
        if manifest.config.hash() != manifest.config_hash {
            return Err(ConfigError::Invalid(format!(
                "manifest hash {} does not match its configuration ({})",
                manifest.config_hash,
                manifest.config.hash()
            ))
            .into());
        }
        Ok(manifest)
    }
}

/// Mean and standard error of per-seed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub mean: f64,
    pub se: f64,
    pub per_seed: Vec<f64>,
}

impl SeedStats {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let se = if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            se,
            per_seed: values,
        }
    }

    /// Whether `self` exceeds `other` by more than `z` combined standard errors.
    pub fn exceeds(&self, other: &SeedStats, z: f64) -> bool {
        self.mean - other.mean > z * self.se.hypot(other.se)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub from: usize,
    pub to: usize,
    pub accuracy: SeedStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    /// Accuracy averaged over every round.
    pub mean_accuracy: f64,
    pub window_from: usize,
    pub window_to: usize,
    /// Accuracy over the summary window, one value per seed.
    pub window: SeedStats,
    /// Window accuracy minus that of no adaptation, when both ran.
    pub gain_vs_none: Option<f64>,
    pub gain_se: Option<f64>,
    /// Mean adapter KL over the last rounds, for adapter strategies.
    pub mean_adapter_kl_tail: Option<f64>,
    /// Accuracy between consecutive backbone switches.
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub tau: f64,
    pub rounds: usize,
    pub seeds: Vec<u64>,
    pub strategies: Vec<StrategySummary>,
}

impl Summary {
    pub fn strategy(&self, label: &str) -> Option<&StrategySummary> {
        self.strategies.iter().find(|s| s.strategy == label)
    }
}

/// One finished trajectory.
#[derive(Debug, Clone)]
pub struct TrajectoryOutput {
    pub strategy: String,
    pub seed: u64,
    pub records: Vec<TrajectoryRecord>,
    pub adapter: Option<AdapterNet>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub summary: Summary,
    pub trajectories: Vec<TrajectoryOutput>,
}

pub fn csv_name(strategy: &str, seed: u64) -> String {
    format!("trajectory_{strategy}_seed{seed}.csv")
}

pub fn adapter_name(seed: u64) -> String {
    format!("adapter_pap_seed{seed}.json")
}

pub fn load_adapter(path: &Path) -> Result<AdapterNet, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn switch_segments(config: &ExperimentConfig) -> Vec<(usize, usize)> {
    let mut starts: Vec<usize> = config
        .switch_schedule
        .iter()
        .map(|s| s.round)
        .filter(|&r| r < config.rounds)
        .collect();
    starts.sort_unstable();
    starts.dedup();
    if starts.is_empty() {
        return Vec::new();
    }
    let mut bounds = vec![0];
    bounds.extend(starts);
    bounds.push(config.rounds);
    bounds.windows(2).map(|w| (w[0], w[1] - 1)).collect()
}

fn summarize(config: &ExperimentConfig, tau: f64, trajectories: &[TrajectoryOutput]) -> Summary {
    let last = config.rounds - 1;
    let from = config.summary_from.min(last);
    let segments = switch_segments(config);
    let per_strategy = |label: &str| -> Vec<&TrajectoryOutput> {
        trajectories
            .iter()
            .filter(|t| t.strategy == label)
            .collect()
    };
    let window_of = |label: &str| {
        SeedStats::new(
            per_strategy(label)
                .iter()
                .map(|t| mean_accuracy(&t.records, from, last).unwrap_or(f64::NAN))
                .collect(),
        )
    };
    let none = config
        .strategies
        .iter()
        .any(|s| s == "none")
        .then(|| window_of("none"));
    let strategies = config
        .strategies
        .iter()
        .map(|label| {
            let runs = per_strategy(label);
            let window = window_of(label);
            let overall = runs
                .iter()
                .map(|t| mean_accuracy(&t.records, 0, last).unwrap_or(f64::NAN))
                .sum::<f64>()
                / runs.len() as f64;
            let kl: Vec<f64> = runs
                .iter()
                .flat_map(|t| {
                    t.records
                        .iter()
                        .filter(|r| r.round + KL_TAIL > last)
                        .filter_map(|r| r.adapter_kl)
                })
                .collect();
            let segments = segments
                .iter()
                .map(|&(a, b)| Segment {
                    from: a,
                    to: b,
                    accuracy: SeedStats::new(
                        runs.iter()
                            .map(|t| mean_accuracy(&t.records, a, b).unwrap_or(f64::NAN))
                            .collect(),
                    ),
                })
                .collect();
            StrategySummary {
                strategy: label.clone(),
                mean_accuracy: overall,
                window_from: from,
                window_to: last,
                gain_vs_none: none.as_ref().map(|n| window.mean - n.mean),
                gain_se: none.as_ref().map(|n| window.se.hypot(n.se)),
                window,
                mean_adapter_kl_tail: (!kl.is_empty())
                    .then(|| kl.iter().sum::<f64>() / kl.len() as f64),
                segments,
            }
        })
        .collect();
    Summary {
        config_hash: config.hash(),
        tau,
        rounds: config.rounds,
        seeds: config.seeds(),
        strategies,
    }
}

/// Runs every (strategy, seed) trajectory in parallel and writes one CSV per
/// trajectory, adapter snapshots for adapter strategies, `summary.json` and
/// `manifest.json` into `out_dir`.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
    progress: bool,
) -> Result<RunOutcome, RunError> {
    config.validate()?;
    let started_unix = now_unix();
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let resolved = Resolved::new(config)?;
    if progress {
        eprintln!("tau = {}", resolved.shift.tau);
    }
    let initial_adapter = match &config.adapter_snapshot {
        Some(path) => Some(load_adapter(path)?),
        None => None,
    };
    let switch_schedule: Vec<_> = config
        .switch_schedule
        .iter()
        .map(|s| (s.round, resolved.backbones[&s.backbone].clone()))
        .collect();

    let jobs: Vec<(String, u64)> = config
        .strategies
        .iter()
        .flat_map(|s| {
            config
                .seeds()
                .into_iter()
                .map(move |seed| (s.clone(), seed))
        })
        .collect();

    let results: Vec<Result<(TrajectoryOutput, Vec<String>), RunError>> = jobs
        .par_iter()
        .map(|(label, seed)| {
            let mut tc =
                TrajectoryConfig::new(resolved.shift.clone(), config.strategy(label)?, *seed);
            tc.rounds = config.rounds;
            tc.train_n = config.train_n;
            tc.test_n = config.test_n;
            tc.alpha = config.alpha;
            tc.switch_schedule = switch_schedule.clone();
            let adapter = match label.as_str() {
                "pap" => initial_adapter.clone(),
                _ => None,
            };
            let csv_path = out_dir.join(csv_name(label, *seed));
            let written = run_trajectory_with_state(
                resolved.world.clone(),
                resolved.deployed.clone(),
                &tc,
                adapter,
            );
            let (records, state) = match written {
                Ok(ok) => ok,
                Err(partial) => {
                    let file = std::fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
                    write_csv(&partial.records, std::io::BufWriter::new(file))?;
                    return Err(RunError::Trajectory {
                        strategy: label.clone(),
                        seed: *seed,
                        completed: partial.records.len(),
                        partial: csv_path,
                        source: partial.source,
                    });
                }
            };
            let file = std::fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
            write_csv(&records, std::io::BufWriter::new(file))?;
            let mut outputs = vec![csv_name(label, *seed)];
            if let Some(net) = &state.adapter {
                let path = out_dir.join(adapter_name(*seed));
                write_file(
                    &path,
                    serde_json::to_string(net)
                        .map_err(performa::Error::from)?
                        .as_bytes(),
                )?;
                outputs.push(adapter_name(*seed));
            }
            if progress {
                let last = config.rounds - 1;
                let acc = mean_accuracy(&records, config.summary_from.min(last), last)
                    .unwrap_or(f64::NAN);
                eprintln!("{label} seed {seed}: window accuracy {acc:.4}");
            }
            Ok((
                TrajectoryOutput {
                    strategy: label.clone(),
                    seed: *seed,
                    records,
                    adapter: state.adapter,
                },
                outputs,
            ))
        })
        .collect();

    let mut trajectories = Vec::with_capacity(results.len());
    let mut outputs = Vec::new();
    for r in results {
        let (t, files) = r?;
        trajectories.push(t);
        outputs.extend(files);
    }
    let summary = summarize(config, resolved.shift.tau, &trajectories);
    let summary_path = out_dir.join(SUMMARY_FILE);
    write_file(
        &summary_path,
        serde_json::to_string_pretty(&summary)
            .map_err(performa::Error::from)?
            .as_bytes(),
    )?;
    outputs.push(SUMMARY_FILE.into());

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: config.hash(),
        seeds: config.seeds(),
        tau: resolved.shift.tau,
        outputs,
        started_unix,
        finished_unix: now_unix(),
        config: config.clone(),
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    write_file(
        &manifest_path,
        serde_json::to_string_pretty(&manifest)
            .map_err(performa::Error::from)?
            .as_bytes(),
    )?;
    Ok(RunOutcome {
        manifest,
        summary,
        trajectories,
    })
}
