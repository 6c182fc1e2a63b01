//! `svdlab`: run federated training, gradient inversion evaluations and
//! parameter sweeps from a JSON experiment file.

mod commands;
mod spec;

use clap::{Args, Parser, Subcommand};
use spec::{ExperimentSpec, Mode};
use std::path::PathBuf;
use std::process::ExitCode;
use svdlab_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "svdlab",
    version,
    about = "SVD-based gradient defense laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run federated training; writes rounds.csv and model.ckpt.
    Train(Common),
    /// Attack sampled private batches under each configured defense.
    Attack(Common),
    /// Repeat training and attack evaluation over one parameter axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Parameter to vary (beta, rho, alpha, noise_scale, prune_rate,
        /// local_lr, clients_per_round).
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values.
        #[arg(long)]
        values: Option<String>,
    },
}

fn config_failure(lines: &[String]) -> ExitCode {
    for l in lines {
        eprintln!("config error: {l}");
    }
    ExitCode::from(EXIT_CONFIG)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mode, common, axis, values) = match cli.command {
        Command::Train(c) => (Mode::Train, c, None, None),
        Command::Attack(c) => (Mode::Attack, c, None, None),
        Command::Sweep {
            common,
            axis,
            values,
        } => (Mode::Sweep, common, axis, values),
    };

    let mut spec = match ExperimentSpec::load(&common.config) {
        Ok(s) => s,
        Err(lines) => return config_failure(&lines),
    };
    if let Ok(raw) = std::env::var("SVDLAB_SEED") {
        match raw.trim().parse::<u64>() {
            Ok(seed) => spec.override_seed(seed),
            Err(e) => return config_failure(&[format!("SVDLAB_SEED={raw:?} is not a u64: {e}")]),
        }
    }
    let mut errs: Vec<String> = spec
        .errors(mode)
        .into_iter()
        .map(|e| format!("{}: {e}", common.config.display()))
        .collect();

    let sweep = if mode == Mode::Sweep {
        let axis = axis.or_else(|| spec.sweep.as_ref().map(|s| s.axis.clone()));
        let values = match values {
            Some(v) => spec::parse_values(&v),
            None => match &spec.sweep {
                Some(s) if !s.values.is_empty() => Ok(s.values.clone()),
                _ => Err("sweep values must not be empty".to_string()),
            },
        };
        match (axis, values) {
            (Some(a), Ok(v)) => {
                let mut probe = spec.fl.clone();
                if let Err(e) = spec::apply_axis(&mut probe, &a, v[0]) {
                    errs.push(e);
                }
                Some((a, v))
            }
            (None, _) => {
                errs.push("sweep needs --axis (or sweep.axis in the config)".into());
                None
            }
            (_, Err(e)) => {
                errs.push(e);
                None
            }
        }
    } else {
        None
    };
    if !errs.is_empty() {
        return config_failure(&errs);
    }

    let sweep_ref = sweep.as_ref().map(|(a, v)| (a.as_str(), v.as_slice()));
    match commands::run(mode, &spec, &common.out, sweep_ref) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = match e.downcast_ref::<Error>() {
                Some(Error::InvalidConfig(_)) => EXIT_CONFIG,
                Some(Error::NumericalFailure(_)) => EXIT_NUMERICAL,
                _ => 1,
            };
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
