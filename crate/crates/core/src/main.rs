//! Command-line front end: build an experiment config from a JSON file or a
//! named preset, apply flag overrides, run it, and report where the outputs
//! landed. Exit codes: 0 success, 2 config/input, 3 numeric, 4 format/io.

use std::fs;
use std::path::PathBuf;

use clap::Parser;

use fedsim::attacks::AttackKind;
use fedsim::federation::Defense;
use fedsim::harness::{preset, run_experiment, ExperimentConfig, RunOutcome, PRESET_NAMES};
use fedsim::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "fedsim",
    version,
    about = "Deterministic federated-learning simulator: distillation objectives, poisoning attacks, robust aggregation"
)]
struct Cli {
    /// Path to a JSON experiment config (exclusive with --preset).
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    config: Option<PathBuf>,

    /// Start from a named preset configuration.
    #[arg(long, value_name = "NAME", value_parser = PRESET_NAMES)]
    preset: Option<String>,

    /// Experiment seed; sets both the federation and partition seeds.
    #[arg(long)]
    seed: Option<u64>,

    /// Attack to run.
    #[arg(long, value_parser = ["none", "statopt", "dynopt"])]
    attack: Option<String>,

    /// Server aggregation rule. Switching to trmean keeps the configured
    /// trim width if one is set, otherwise trims 2 per side.
    #[arg(long, value_parser = ["mean", "trmean"])]
    defense: Option<String>,

    /// Dirichlet concentration for the client partition.
    #[arg(long)]
    alpha: Option<f64>,

    /// Final-layer KD coefficient (KD-objective family).
    #[arg(long)]
    beta: Option<f64>,

    /// Final-layer contrastive coefficient (contrastive family).
    #[arg(long)]
    mu: Option<f64>,

    /// Shallow-distillation coefficient (hybrid objectives).
    #[arg(long)]
    gamma: Option<f64>,

    /// Diminishing factor dividing the final-layer coefficient.
    #[arg(long)]
    b: Option<f64>,

    /// Number of federated rounds.
    #[arg(long)]
    rounds: Option<usize>,

    /// Output directory for metrics CSV and summary JSON.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match (&cli.config, &cli.preset) {
        (Some(path), None) => {
            let text = fs::read_to_string(path).map_err(fedsim::error::io_err(path))?;
            ExperimentConfig::from_json(&text)?
        }
        (None, Some(name)) => preset(name)?,
        _ => {
            return Err(Error::Config(
                "provide either --config PATH or --preset NAME".into(),
            ))
        }
    };

    if let Some(seed) = cli.seed {
        config.federation.seed = seed;
        config.partition.seed = seed;
    }
    if let Some(attack) = &cli.attack {
        config.attack.kind = match attack.as_str() {
            "none" => AttackKind::None,
            "statopt" => AttackKind::StatOpt,
            "dynopt" => AttackKind::DynOpt,
            other => return Err(Error::Config(format!("unknown attack {other:?}"))),
        };
    }
    if let Some(defense) = &cli.defense {
        config.defense = match defense.as_str() {
            "mean" => Defense::Mean,
            "trmean" => match config.defense {
                Defense::TrimmedMean { m } => Defense::TrimmedMean { m },
                Defense::Mean => Defense::TrimmedMean { m: 2 },
            },
            other => return Err(Error::Config(format!("unknown defense {other:?}"))),
        };
    }
    if let Some(alpha) = cli.alpha {
        config.partition.alpha = alpha;
    }
    if let Some(beta) = cli.beta {
        config.loss.beta = beta;
    }
    if let Some(mu) = cli.mu {
        config.loss.mu = mu;
    }
    if let Some(gamma) = cli.gamma {
        config.loss.gamma = gamma;
    }
    if let Some(b) = cli.b {
        config.loss.b = b;
    }
    if let Some(rounds) = cli.rounds {
        config.federation.rounds = rounds;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }

    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<RunOutcome> {
    let config = build_config(cli)?;
    log::info!(
        "running {:?}: {} clients, {} rounds, objective {:?}, attack {:?}",
        config.run_label,
        config.federation.total_clients,
        config.federation.rounds,
        config.loss.kind,
        config.attack.kind
    );
    run_experiment(&config)
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            println!(
                "run {}: {} rounds completed, final accuracy {:.2}%",
                outcome.summary.run_label,
                outcome.summary.rounds_completed,
                outcome.summary.final_accuracy_pct
            );
            println!("metrics: {}", outcome.csv_path.display());
            println!("summary: {}", outcome.summary_path.display());
            if let Some(abort) = &outcome.summary.abort {
                eprintln!(
                    "error: numeric: run aborted at round {}: {}",
                    abort.round, abort.message
                );
                std::process::exit(3);
            }
        }
        Err(e) => {
            // Display strings already start with their category (config:,
            // input:, numeric:, format:, io:).
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
