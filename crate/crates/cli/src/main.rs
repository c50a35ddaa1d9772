use std::path::PathBuf;
use std::process::ExitCode;

use amcmc_cli::config::RunConfig;
use amcmc_cli::experiments::{run, Experiment, Format, Options};
use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

/// Adaptive MCMC experiments with exact finite-state diagnostics.
///
/// Every flag can also be set through an environment variable with the
/// AMCMC_ prefix (AMCMC_CONFIG, AMCMC_SEED, AMCMC_THREADS, AMCMC_OUT,
/// AMCMC_FORMAT). Flags and environment variables override the config file.
#[derive(Debug, Parser)]
#[command(name = "amcmc", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, env = "AMCMC_CONFIG")]
    config: Option<PathBuf>,
    /// Root seed; chain i uses ChaCha8 stream i under this seed.
    #[arg(long, global = true, env = "AMCMC_SEED")]
    seed: Option<u64>,
    /// Worker threads for replication studies (default: all cores).
    #[arg(long, global = true, env = "AMCMC_THREADS")]
    threads: Option<usize>,
    /// Output directory (default: runs/<command>).
    #[arg(long, global = true, env = "AMCMC_OUT")]
    out: Option<PathBuf>,
    /// Table format of the artifacts.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv, env = "AMCMC_FORMAT")]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Reproduce the two-kernel cyclic counterexample.
    Counterexample,
    /// Law-of-large-numbers study over an n grid.
    Lln,
    /// Replicated CLT study against the oracle variance.
    Clt,
    /// Poisson and Lipschitz bounds for every member and pair.
    Bounds,
    /// Waning diagnostics and the decomposition ledger of one run.
    Waning,
    /// Solve the Poisson equation for one family member.
    Poisson,
    /// Stationarity, Dobrushin coefficients and decay curves.
    KernelInfo,
}

impl From<Command> for Experiment {
    fn from(c: Command) -> Self {
        match c {
            Command::Counterexample => Experiment::Counterexample,
            Command::Lln => Experiment::Lln,
            Command::Clt => Experiment::Clt,
            Command::Bounds => Experiment::Bounds,
            Command::Waning => Experiment::Waning,
            Command::Poisson => Experiment::Poisson,
            Command::KernelInfo => Experiment::KernelInfo,
        }
    }
}

fn execute(cli: Cli) -> Result<i32> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let exp = Experiment::from(cli.command);
    let out = cli
        .out
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(exp.name()));
    let opts = Options {
        out,
        format: cli.format,
    };
    let record = run(exp, &cfg, &opts)?;
    if record.prior_runs > 0 {
        eprintln!(
            "note: {} earlier run(s) with config hash {} in {}",
            record.prior_runs,
            &record.config_hash[..12],
            opts.out.display()
        );
    }
    for check in &record.checks {
        let mark = if check.pass { "pass" } else { "FAIL" };
        println!("{mark:4}  {}  {}", check.name, check.detail);
    }
    println!(
        "{}: {:?} (artifacts in {})",
        record.experiment,
        record.status,
        opts.out.display()
    );
    Ok(record.status.exit_code())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
