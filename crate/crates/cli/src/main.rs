use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use performa::mechanism::calibrate_tau;
use performa_cli::args::{Cli, Command};
use performa_cli::config::{ConfigError, Resolved, DEFAULT_TARGET_DROP};
use performa_cli::run::{run_experiment, RunError};
use performa_cli::{report_ranking, ExperimentConfig};

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<RunError>() {
        Some(e) => e.exit_code() as u8,
        None => 2,
    }
}

fn simulate(config: &ExperimentConfig, out: &std::path::Path, quiet: bool) -> anyhow::Result<()> {
    let outcome = run_experiment(config, out, !quiet)?;
    println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
    Ok(())
}

fn calibrate(config: &ExperimentConfig) -> anyhow::Result<()> {
    let target = config.target_drop.unwrap_or(DEFAULT_TARGET_DROP);
    let resolved = Resolved::new(&ExperimentConfig {
        tau: Some(-1.0),
        target_drop: None,
        ..config.clone()
    })
    .map_err(RunError::from)?;
    let cal = calibrate_tau(
        &resolved.world,
        &resolved.deployed,
        target,
        config.calibration_n,
        config.calibration_seed,
    )
    .map_err(RunError::from)
    .context("calibration failed")?;
    let out = serde_json::json!({
        "target_drop": target,
        "tau": cal.tau,
        "baseline_accuracy": cal.baseline,
        "achieved_drop": cal.achieved_drop,
        "iterations": cal.iterations,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate(args) => {
            let config = args.resolve()?;
            simulate(&config, &args.out, args.quiet)
        }
        Command::Switch(args) => {
            let config = args.resolve()?;
            simulate(&config, &args.run.out, args.run.quiet)
        }
        Command::Calibrate(args) => {
            let config = args.resolve()?;
            if config.tau.is_some() {
                return Err(ConfigError::Invalid(
                    "calibrate takes --target-drop, not --tau".into(),
                )
                .into());
            }
            calibrate(&config)
        }
        Command::Rank(args) => {
            let config = args.resolve()?;
            let report = report_ranking(&config)?;
            if args.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.to_table());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
