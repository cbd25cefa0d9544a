//! `quenchctl`: forward simulations, assumption validation, adjoint gradient
//! checks, projected-gradient control solves, and quench-continuation studies
//! driven by a JSON run configuration.
//!
//! Exit codes: 0 = pass, 1 = a hard assertion or solver failure, 2 = config
//! error. Reports are written to the output directory in every case where a
//! run got far enough to produce one.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use report::OutDir;

#[derive(Parser)]
#[command(name = "quenchctl", version, about = "Nonisothermal Cahn-Hilliard control laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: `out` next to the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores; env fallback QUENCHCTL_THREADS).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Forward solve with per-step diagnostics and optional snapshots.
    Simulate(CommonArgs),
    /// Projected-gradient control solve with stationarity certificates.
    Optimize(CommonArgs),
    /// State rate study and control continuation over the quench schedule.
    QuenchStudy(CommonArgs),
    /// Adjoint gradient vs central finite differences, with dt refinement.
    Gradcheck(CommonArgs),
    /// Check the standing assumptions and report violations.
    Validate(CommonArgs),
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::Simulate(a)
            | Command::Optimize(a)
            | Command::QuenchStudy(a)
            | Command::Gradcheck(a)
            | Command::Validate(a) => a,
        }
    }
}

fn init_threads(requested: Option<usize>) {
    let n = requested.or_else(|| {
        std::env::var("QUENCHCTL_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    #[cfg(feature = "parallel")]
    if let Some(n) = n {
        // ignore failure (pool may already be initialized in tests)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    if n.is_some() {
        eprintln!("note: built without the parallel feature; --threads ignored");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = cli.command.common();
    init_threads(common.threads);

    let out_root = common
        .out
        .clone()
        .unwrap_or_else(|| common.config.with_extension("").with_file_name("out"));

    let config = match RunConfig::load(&common.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let resolved = match config.resolve() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let out = match OutDir::create(&out_root) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("output error: {e:#}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = out.write_config_echo(&resolved.config) {
        eprintln!("output error: {e:#}");
        return ExitCode::from(2);
    }

    let result = match &cli.command {
        Command::Simulate(_) => commands::simulate(&resolved, &out),
        Command::Optimize(_) => commands::optimize(&resolved, &out),
        Command::QuenchStudy(_) => commands::quench_study(&resolved, &out),
        Command::Gradcheck(_) => commands::gradcheck(&resolved, &out),
        Command::Validate(_) => commands::validate(&resolved, &out),
    };

    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let _ = out.log_line(&format!("error: {e:#}"));
            ExitCode::from(1)
        }
    }
}
