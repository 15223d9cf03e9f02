use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sedjoco::error::Result;
use sedjoco::harness::{self, Config, RunSpec};

#[derive(Parser)]
#[command(
    name = "sedjoco",
    version,
    about = "Joint blind source separation benchmarks: closed-form interference \
             predictions under model errors, verified by Monte-Carlo trials"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Closed-form predictions for a configuration, without trials
    Predict {
        /// Run configuration file (flat `key = value` lines)
        #[arg(long)]
        config: PathBuf,
        /// Overrides `run.seed`
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for the CSV files (default: current directory)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a gnuplot script next to the CSV files
        #[arg(long)]
        emit_plots: bool,
    },
    /// Monte-Carlo verification of the predictions
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Trials per grid point (overrides `run.trials`)
        #[arg(long)]
        trials: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (default: SEDJOCO_THREADS, then all cores)
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        emit_plots: bool,
    },
    /// Runs a bundled experiment: exp1-mu, exp1-t, exp2, exp3, exp3-paper
    Experiment {
        id: String,
        /// Configuration overrides, e.g. --override run.trials=100
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        emit_plots: bool,
    },
    /// Internal consistency battery: solver certification, gradient and
    /// covariance oracles, mutation guards
    Selftest,
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<ExitCode> {
    match Cli::parse().cmd {
        Cmd::Predict { config, seed, out, emit_plots } => {
            let mut cfg = Config::from_file(&config)?;
            if let Some(s) = seed {
                cfg.set(&format!("run.seed={s}"))?;
            }
            cfg.set("run.trials=0")?;
            run_and_write(cfg, None, out, emit_plots)
        }
        Cmd::Simulate { config, trials, seed, threads, out, emit_plots } => {
            let mut cfg = Config::from_file(&config)?;
            cfg.set(&format!("run.trials={trials}"))?;
            if let Some(s) = seed {
                cfg.set(&format!("run.seed={s}"))?;
            }
            run_and_write(cfg, threads, out, emit_plots)
        }
        Cmd::Experiment { id, overrides, threads, out, emit_plots } => {
            let mut cfg = harness::builtin_config(&id)?;
            for o in &overrides {
                cfg.set(o)?;
            }
            run_and_write(cfg, threads, out, emit_plots)
        }
        Cmd::Selftest => {
            let mut ok = true;
            for c in harness::selftest() {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn run_and_write(
    cfg: Config,
    threads: Option<usize>,
    out: Option<PathBuf>,
    emit_plots: bool,
) -> Result<ExitCode> {
    let spec = RunSpec::from_config(&cfg)?;
    let threads = threads
        .or_else(|| std::env::var("SEDJOCO_THREADS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(0);
    let output = harness::run(&spec, threads, |row| println!("{}", harness::row_line(row)))?;
    let dir = out.unwrap_or_else(|| PathBuf::from("."));
    let (csv, elems) = harness::write_csv(&output, &dir)?;
    println!("wrote {} and {}", csv.display(), elems.display());
    if emit_plots {
        let gp = harness::emit_plot(&output, &dir)?;
        println!("wrote {}", gp.display());
    }
    Ok(if output.failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}
