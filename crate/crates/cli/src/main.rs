//! `caps`: run experiment grids from a JSON config.
//!
//! Exit codes: 0 on success, 1 on a validation error, 2 on an execution error.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use caps_core::experiment::{parse_config, run_experiment, write_report};
use caps_core::ExperimentKind;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "caps",
    version,
    about = "Context-aware power sampling experiments"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    #[command(flatten)]
    global: Global,
}

#[derive(Debug, Args)]
struct Global {
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed (overrides `master_seed` in the config).
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Compare chain samples with the exactly enumerated target.
    Oracle { config: PathBuf },
    /// Sweep alpha across the pivotal-window preference flip.
    Flip { config: PathBuf },
    /// Compare greedy, flat search, best-of-N and CAPS variants.
    Ablation { config: PathBuf },
    /// Estimate effective horizons on the drift chain.
    Horizon { config: PathBuf },
    /// Run gated episodes and write per-block traces.
    Episode { config: PathBuf },
}

impl Verb {
    fn split(&self) -> (ExperimentKind, &PathBuf) {
        match self {
            Verb::Oracle { config } => (ExperimentKind::Oracle, config),
            Verb::Flip { config } => (ExperimentKind::Flip, config),
            Verb::Ablation { config } => (ExperimentKind::Ablation, config),
            Verb::Horizon { config } => (ExperimentKind::Horizon, config),
            Verb::Episode { config } => (ExperimentKind::Episode, config),
        }
    }
}

const VALIDATION: u8 = 1;
const EXECUTION: u8 = 2;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<(), (u8, String)> {
    let (verb, path) = cli.verb.split();
    let mut config = parse_config(path).map_err(|e| (VALIDATION, e.to_string()))?;
    if config.kind != verb {
        return Err((
            VALIDATION,
            format!("`caps {verb}` was given a config of kind {}", config.kind),
        ));
    }
    if let Some(seed) = cli.global.seed {
        config.master_seed = seed;
    }
    if let Some(out) = cli.global.out {
        config.output_dir = out;
    }
    if cli.global.jobs == Some(0) {
        return Err((VALIDATION, "--jobs must be >= 1".into()));
    }

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.global.jobs {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| (EXECUTION, e.to_string()))?;
    let report = pool
        .install(|| run_experiment(&config))
        .map_err(|e| (EXECUTION, e.to_string()))?;
    let written = write_report(&report, &config, &config.output_dir)
        .map_err(|e| (EXECUTION, e.to_string()))?;

    let failed = report.rows.iter().filter(|r| !r["error"].is_null()).count();
    // A closed stdout (say, piped into `head`) must not turn success into a panic.
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "{} cells ({} failed), fingerprint {}",
        report.rows.len(),
        failed,
        &report.fingerprint[..16]
    );
    for p in written {
        let _ = writeln!(out, "wrote {}", p.display());
    }
    if failed > 0 {
        return Err((
            EXECUTION,
            format!(
                "{failed} of {} cells failed; see metrics.csv",
                report.rows.len()
            ),
        ));
    }
    Ok(())
}
