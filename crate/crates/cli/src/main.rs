use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use stochflow_cli::{dispatch, Command};

/// Stochastic transport-noise fluid runs and checks on the periodic torus.
#[derive(Parser, Debug)]
#[command(name = "stochflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (default: `output.directory` from the config, then
    /// `stochflow-out/<subcommand>`).
    #[arg(long, global = true, env = "STOCHFLOW_OUT")]
    out: Option<PathBuf>,

    /// Master seed; overrides the config and re-derives the W, B and initial
    /// condition seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Cmd {
    /// Operator identity suite.
    Identities,
    /// Solve one trajectory and write its energy and speed history.
    Run,
    /// Kelvin residual and circulation transport closure along loops.
    Kelvin,
    /// Energy ledger.
    Energy,
    /// Weber (pullback and label-grid) and Cauchy residuals.
    Weber,
    /// Conditional Kelvin estimate over B-ensemble members.
    Cikelvin,
    /// Jacobian determinant against its closed form, compressible fields.
    Jacobian,
    /// dt, member-count or amplitude sweep with fitted slopes.
    Sweep,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Identities => Command::Identities,
            Cmd::Run => Command::Run,
            Cmd::Kelvin => Command::Kelvin,
            Cmd::Energy => Command::Energy,
            Cmd::Weber => Command::Weber,
            Cmd::Cikelvin => Command::Cikelvin,
            Cmd::Jacobian => Command::Jacobian,
            Cmd::Sweep => Command::Sweep,
        }
    }
}

fn execute(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("thread pool")?;
    }
    let path = cli.config.context("--config is required")?;
    let mut cfg = stochflow_core::parse_config(&path)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_master_seed(seed)?;
    }
    let cmd: Command = cli.command.into();
    let out = cli
        .out
        .or_else(|| cfg.output.directory.clone())
        .unwrap_or_else(|| PathBuf::from("stochflow-out").join(cmd.name()));
    let outcome = dispatch(cmd, &cfg, &out)?;
    println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
    Ok(outcome.passed)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
