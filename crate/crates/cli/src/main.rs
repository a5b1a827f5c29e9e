use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use polymerlab::error::Error;
use polymerlab::experiment::{build_report, run_experiment, ExperimentConfig, ReportFilter};

/// Batch runner for polymer partition-function experiments.
#[derive(Debug, Parser)]
#[command(name = "polymerlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment and append its records to `<out>/<kind>-<hash>.jsonl`.
    Run {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        /// Master seed, overriding the config.
        #[arg(long, value_name = "U64")]
        seed: Option<u64>,
        /// Worker threads, overriding the config.
        #[arg(long, value_name = "N", env = "POLYMERLAB_THREADS")]
        threads: Option<usize>,
        /// Results directory [default: config value, else `results`].
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Abort on the first numerical failure instead of recording it.
        #[arg(long)]
        strict: bool,
    },
    /// Summarize a results directory into `<out>/report/`.
    Report {
        #[arg(long, value_name = "DIR", default_value = "results")]
        out: PathBuf,
        /// Only records of this experiment kind.
        #[arg(long)]
        kind: Option<String>,
        /// Only records of this op.
        #[arg(long)]
        op: Option<String>,
    },
    /// Check a config without running it.
    Validate {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RESOURCE: u8 = 3;
const EXIT_INVARIANT: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Argument(_) => EXIT_CONFIG,
        Error::Resource { .. } | Error::Io(_) => EXIT_RESOURCE,
        _ => EXIT_INVARIANT,
    }
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(&e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => match ExperimentConfig::load(&config).and_then(|c| c.validate().map(|_| c)) {
            Ok(c) => {
                println!("ok: {} ({})", c.experiment_id(), config.display());
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Run {
            config,
            seed,
            threads,
            out,
            strict,
        } => {
            let mut cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            if let Some(s) = seed {
                cfg.experiment.seed = s;
            }
            if threads.is_some() {
                cfg.experiment.threads = threads;
            }
            let dir = out
                .or_else(|| cfg.experiment.out.clone())
                .unwrap_or_else(|| PathBuf::from("results"));
            match run_experiment(&cfg, Some(&dir), strict) {
                Ok(o) => {
                    let path = o.path.map(|p| p.display().to_string()).unwrap_or_default();
                    println!("{} records ({} failed) -> {path}", o.records.len(), o.failures);
                    ExitCode::SUCCESS
                }
                // argument errors after validation passed mean a precondition escaped it
                Err(Error::Argument(m)) => {
                    eprintln!("error: unvalidated precondition: {m}");
                    ExitCode::from(EXIT_INVARIANT)
                }
                Err(e) => fail(e),
            }
        }
        Command::Report { out, kind, op } => {
            let r = match build_report(&out, &ReportFilter { kind, op }) {
                Ok(r) => r,
                Err(e) => return fail(e),
            };
            if r.malformed > 0 {
                eprintln!("warning: skipped {} malformed records", r.malformed);
            }
            let dest = out.join("report");
            if let Err(e) = r.write_all(&dest) {
                return fail(e);
            }
            print!("{}", r.summary_text());
            ExitCode::SUCCESS
        }
    }
}
