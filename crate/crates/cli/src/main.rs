//! Command-line front end: config-driven experiments writing CSV, JSON and binary artifacts.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("validation: {0}")]
    Validation(String),
    #[error("{stage}: {source}")]
    Numerical {
        stage: &'static str,
        source: qcbadc::Error,
    },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("self-test failed: {0} check(s)")]
    SelfTest(usize),
}

impl From<qcbadc::Error> for CliError {
    fn from(e: qcbadc::Error) -> Self {
        use qcbadc::Error as E;
        let stage = match &e {
            E::InvalidDesign(_) | E::InvalidConfig(_) | E::Synthesis(_) | E::Format(_) => {
                return CliError::Validation(e.to_string())
            }
            E::NonFiniteState { .. } | E::NonFiniteObservation | E::Unstable { .. } => "simulate",
            E::UnderDetermined { .. } | E::NotConverged { .. } => "calibrate",
            E::ChannelMismatch { .. } => "estimate",
            E::TooShort { .. } | E::BandOutOfRange { .. } | E::NoNotch { .. } => "analyze",
        };
        CliError::Numerical { stage, source: e }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical { .. } | CliError::Io(_) => 3,
            CliError::SelfTest(_) => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "qcbadc",
    version,
    about = "Quadrature control-bounded ADC experiments"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand. Precedence: defaults < file < --set < flags.
#[derive(Debug, Args)]
struct Common {
    /// TOML experiment file.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set design.n=8` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true, value_parser = parse_kv)]
    set: Vec<(String, String)>,
    /// Output directory.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    /// Shorthand for design.n.
    #[arg(long, global = true)]
    order: Option<usize>,
    /// Shorthand for design.osr.
    #[arg(long, global = true)]
    osr: Option<f64>,
    /// Shorthand for design.f_notch (units of fs).
    #[arg(long, global = true)]
    f_notch: Option<f64>,
    /// Shorthand for design.topology (quadrature or lowpass).
    #[arg(long, global = true)]
    topology: Option<String>,
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got '{s}'"))
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print and write the full system and control parametrization.
    Design,
    /// Design, simulate, calibrate, estimate and measure one operating point.
    Run,
    /// Repeat `run` over a list of notch frequencies.
    SweepNotch {
        /// Notches in units of fs, comma separated (overrides sweep.notches).
        #[arg(long, value_delimiter = ',')]
        notches: Option<Vec<f64>>,
    },
    /// Control coefficients against omega_n T.
    CoeffSweep {
        #[arg(long)]
        beta_t: Option<f64>,
        #[arg(long)]
        points: Option<usize>,
    },
    /// Coefficient-mismatch Monte Carlo with checkpointing.
    Montecarlo {
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        /// Ignore an existing checkpoint.
        #[arg(long)]
        fresh: bool,
    },
    /// Fast structural checks; exits with 4 when any fails.
    Selftest,
}

fn overrides(cli: &Cli) -> Vec<(String, String)> {
    let mut o = cli.common.set.clone();
    let c = &cli.common;
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            o.push((k.to_string(), v));
        }
    };
    push(
        "output",
        c.output
            .as_ref()
            .map(|p| format!("{:?}", p.display().to_string())),
    );
    push("design.n", c.order.map(|v| v.to_string()));
    push("design.osr", c.osr.map(|v| format!("{v:?}")));
    push("design.f_notch", c.f_notch.map(|v| format!("{v:?}")));
    push(
        "design.topology",
        c.topology.as_ref().map(|v| format!("{v:?}")),
    );
    match &cli.command {
        Command::SweepNotch { notches: Some(n) } => {
            push("sweep.notches", Some(format!("{n:?}")));
        }
        Command::CoeffSweep { beta_t, points } => {
            push("coeff.beta_t", beta_t.map(|v| format!("{v:?}")));
            push("coeff.points", points.map(|v| v.to_string()));
        }
        Command::Montecarlo {
            trials,
            seed,
            workers,
            ..
        } => {
            push("montecarlo.trials", trials.map(|v| v.to_string()));
            push("montecarlo.seed", seed.map(|v| v.to_string()));
            push("montecarlo.workers", workers.map(|v| v.to_string()));
        }
        _ => {}
    }
    o
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(cli.common.config.as_deref(), &overrides(cli))?;
    match &cli.command {
        Command::Design => commands::design(&cfg),
        Command::Run => commands::run(&cfg),
        Command::SweepNotch { .. } => commands::sweep_notch(&cfg),
        Command::CoeffSweep { .. } => commands::coeff_sweep(&cfg),
        Command::Montecarlo { fresh, .. } => commands::montecarlo(&cfg, *fresh),
        Command::Selftest => commands::selftest(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
