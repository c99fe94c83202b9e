//! Command-line front end: scenario loading, suite orchestration and report output.

pub mod config;
pub mod report;
pub mod suites;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::transport::moments_csv;
pub use config::{Scenario, SuiteName};
pub use report::{Report, Status, SuiteRecord, EXIT_CONFIG, EXIT_PASS, EXIT_STALL, EXIT_SUITE_FAILURE};
pub use suites::{run_scenario, Context, RunOutput};

#[derive(Debug, Parser)]
#[command(name = "specular", version, about = "Specular billiard characteristics and verification suites")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Scenario file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the scenario and sampler seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Multiply every tolerance by this factor.
    #[arg(long, global = true, default_value_t = 1.0)]
    pub tolerance_scale: f64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trace every launch and write the bounce sequences.
    Trace,
    /// Run one suite, or `all`.
    Verify { suite: String },
    /// Run the transport suite and write the moment table.
    Transport,
    /// Run the suites listed in the scenario.
    Report,
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn print_summary(report: &Report) {
    for s in &report.suites {
        let status = match s.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Informational => "INFO",
        };
        println!("{status:<5} {:<22} samples={:<6} stalls={:<3} {:.3}s", s.name.as_str(), s.samples, s.stalls, s.runtime_s);
        for n in &s.notes {
            println!("      {n}");
        }
    }
}

/// Execute a parsed command line and return the process exit code.
pub fn run(cli: &Cli) -> i32 {
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

fn execute(cli: &Cli) -> Result<i32> {
    if let Some(n) = cli.threads {
        // a pool may already exist when called more than once in-process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    if !(cli.tolerance_scale > 0.0) {
        return Err(Error::Config("--tolerance-scale must be positive".into()));
    }
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut scenario = Scenario::load(path)?;
    if let Some(seed) = cli.seed {
        scenario.reseed(seed);
    }
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::Config(format!("{}: {e}", cli.out.display())))?;

    let suites: Vec<SuiteName> = match &cli.command {
        Command::Trace => vec![SuiteName::Trace],
        Command::Verify { suite } if suite == "all" => SuiteName::ALL.to_vec(),
        Command::Verify { suite } => vec![SuiteName::parse(suite)?],
        Command::Transport => vec![SuiteName::TransportInvariance],
        Command::Report => scenario.suites.clone(),
    };
    let out = run_scenario(&scenario, &suites, cli.tolerance_scale)?;
    if let Command::Trace = cli.command {
        let ctx = Context::new(&scenario, cli.tolerance_scale)?;
        let entries = suites::trace_launches(&ctx);
        let json = serde_json::to_string_pretty(&entries).map_err(|e| Error::Config(e.to_string()))?;
        write(&cli.out, &scenario.output.trace, &json)?;
    }
    if !out.moments.is_empty() {
        write(&cli.out, &scenario.output.moments_csv, &moments_csv(&out.moments))?;
    }
    let report_path = write(&cli.out, &scenario.output.report, &out.report.to_json()?)?;
    print_summary(&out.report);
    println!("report written to {}", report_path.display());
    Ok(out.report.exit_code(scenario.tolerances.stall_budget))
}
