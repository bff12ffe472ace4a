//! Experiment runner for the `performa` engine: JSON configuration, parallel
//! sweeps with per-trajectory CSVs, summaries, manifests and ranking reports.

pub mod args;
pub mod config;
pub mod rank;
pub mod run;

pub use config::{BackboneKind, BackboneSpec, ConfigError, ExperimentConfig, Resolved, SwitchAt};
pub use rank::{rank_with, report_ranking, RankReport, RankRow};
pub use run::{run_experiment, RunError, RunManifest, RunOutcome, SeedStats, Summary};
