use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cmfg::CmfgError;
use serde::Serialize;

use cmfg_cli::config::ScenarioConfig;
use cmfg_cli::output::{self, Artifact};
use cmfg_cli::runner;

/// Cournot mean field game solver: equilibrium fields, measure-derivative
/// kernels, master-equation residuals, and oracle validations.
#[derive(Parser)]
#[command(name = "cmfg", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute a scenario config and write the output bundle
    Run {
        /// path to the scenario JSON
        config: PathBuf,
        /// output directory for the bundle
        #[arg(long)]
        out: PathBuf,
        /// RNG seed, overriding the config's
        #[arg(long)]
        seed: Option<u64>,
        /// check the configuration and emit the assumption report only
        #[arg(long)]
        validate_only: bool,
        /// also write a gnuplot script referencing the CSVs
        #[arg(long)]
        emit_plotscript: bool,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NONCONVERGENCE: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Serialize)]
struct ErrorReport<'a> {
    kind: &'a str,
    message: String,
    exit: u8,
}

fn report_error(kind: &str, message: String, exit: u8) -> ExitCode {
    let report = ErrorReport { kind, message, exit };
    match serde_json::to_string(&report) {
        Ok(line) => eprintln!("{line}"),
        Err(_) => eprintln!("{{\"kind\":\"{kind}\",\"exit\":{exit}}}"),
    }
    ExitCode::from(exit)
}

fn init_threads() {
    if let Ok(v) = std::env::var("CMFG_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n > 0 {
                // ignore failure: a pool may already exist
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn main() -> ExitCode {
    let Cli { cmd } = Cli::parse();
    init_threads();
    match cmd {
        Cmd::Run { config, out, seed, validate_only, emit_plotscript } => {
            run(&config, &out, seed, validate_only, emit_plotscript)
        }
    }
}

fn run(config_path: &Path, out: &Path, seed: Option<u64>, validate_only: bool, emit_plotscript: bool) -> ExitCode {
    // config failures exit before anything is written
    let text = match std::fs::read_to_string(config_path) {
        Ok(t) => t,
        Err(e) => return report_error("config", format!("cannot read {}: {e}", config_path.display()), EXIT_CONFIG),
    };
    let cfg = match ScenarioConfig::from_str(&text) {
        Ok(c) => c,
        Err(e) => return report_error("config", format!("invalid scenario config: {e}"), EXIT_CONFIG),
    };
    if let Err(e) = cfg.build() {
        return report_error("config", format!("invalid scenario: {e}"), EXIT_CONFIG);
    }
    let seed = seed.unwrap_or(cfg.seed);

    let result = if validate_only { runner::validate_only(&cfg) } else { runner::execute(&cfg, seed) };

    match result {
        Ok(mut artifacts) => {
            if emit_plotscript && !validate_only {
                artifacts.push(output::plotscript(&artifacts));
            }
            match write_with_manifest(out, &cfg, seed, "ok", None, artifacts) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => report_error("io", format!("cannot write bundle: {e}"), EXIT_IO),
            }
        }
        Err(err) => {
            // numeric breakdowns count as solver failures, not config errors
            let (kind, exit) = match &err {
                CmfgError::Nonconvergence { .. } => ("nonconvergence", EXIT_NONCONVERGENCE),
                CmfgError::Numeric(_) => ("numeric", EXIT_NONCONVERGENCE),
                _ => ("config", EXIT_CONFIG),
            };
            // the manifest is still written on solver-failure paths
            let _ = write_with_manifest(out, &cfg, seed, kind, Some(err.to_string()), Vec::new());
            report_error(kind, err.to_string(), exit)
        }
    }
}

fn write_with_manifest(
    out: &Path,
    cfg: &ScenarioConfig,
    seed: u64,
    outcome: &str,
    error: Option<String>,
    mut artifacts: Vec<Artifact>,
) -> anyhow::Result<()> {
    let manifest = output::manifest_artifact(cfg, seed, outcome, error, &artifacts)?;
    artifacts.push(manifest);
    output::write_bundle(out, &artifacts)?;
    Ok(())
}
