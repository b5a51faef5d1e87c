//! Command-line front end: `nnfvi <fvi-run|mcd-bench|case-study|dp-oracle>`.
//!
//! Exit status is 0 on success, 1 on a domain error and 2 on a usage error
//! (bad flags, unreadable or malformed config). Failures print a JSON object
//! `{"error": <kind>, "message": <text>}` on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nnfvi::experiments::{cmd_case_study, cmd_dp_oracle, cmd_fvi_run, cmd_mcd_bench, Overrides};
use nnfvi::mcd::Engine;
use nnfvi::Error;

#[derive(Parser)]
#[command(name = "nnfvi", version, about = "Fitted value iteration with multi-cut action selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the action-selection engine.
    #[arg(long, value_parser = parse_engine)]
    engine: Option<Engine>,
}

fn parse_engine(s: &str) -> Result<Engine, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Train value networks on an MCIP instance.
    FviRun(Common),
    /// Compare brute force, L-shaped and MCD on random selection problems.
    McdBench(Common),
    /// Flexible versus inflexible capacity over a discount and salvage grid.
    CaseStudy(Common),
    /// Exact lattice DP, optionally compared with a fitted value set.
    DpOracle(Common),
}

type Runner = fn(&Path, &Path, Overrides) -> nnfvi::Result<()>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (run, common): (Runner, Common) = match cli.command {
        Command::FviRun(c) => (cmd_fvi_run, c),
        Command::McdBench(c) => (cmd_mcd_bench, c),
        Command::CaseStudy(c) => (cmd_case_study, c),
        Command::DpOracle(c) => (cmd_dp_oracle, c),
    };
    let overrides = Overrides { seed: common.seed, engine: common.engine };
    match run(&common.config, &common.out, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(e.kind(), &e.to_string());
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}

fn report(kind: &str, message: &str) {
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
}
