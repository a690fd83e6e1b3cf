use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use rac_core::regraph::history_graph;
use rac_core::runner::{self, render_report, ReportFormat, RunArtifacts, RunOptions};
use rac_core::scenario::load_file;
use rac_core::txlog::read_file;

#[derive(Parser)]
#[command(name = "rac", version, about = "Run tool-call scenarios with logging, recovery and rollback")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file and print its report.
    Run {
        scenario: PathBuf,
        /// Directory for the transaction log (in memory when omitted).
        #[arg(long)]
        log_dir: Option<PathBuf>,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the execution graph as DOT to this file.
        #[arg(long)]
        export_graph: Option<PathBuf>,
        /// Write the recovery event trace as JSON lines to this file.
        #[arg(long)]
        export_trace: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        report_format: ReportFormat,
        /// Roll back if the agent's script runs longer than this.
        #[arg(long)]
        max_steps: Option<usize>,
        /// Sleep for real during backoff.
        #[arg(long)]
        real_time: bool,
    },
    /// Run every `*.toml` scenario in a directory and print a summary table.
    Batch {
        dir: PathBuf,
        #[arg(long)]
        log_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the execution graph of a transaction log file as DOT.
    Graph { logfile: PathBuf },
}

fn run_one(path: &Path, options: &RunOptions) -> Result<RunArtifacts, String> {
    let scenario = load_file(path).map_err(|e| e.to_string())?;
    runner::run(&scenario, options).map_err(|e| format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run {
            scenario,
            log_dir,
            seed,
            export_graph,
            export_trace,
            report_format,
            max_steps,
            real_time,
        } => {
            let options = RunOptions {
                log_dir,
                seed,
                max_steps,
                real_time,
            };
            match run_one(&scenario, &options) {
                Err(e) => {
                    eprintln!("error: {e}");
                    1
                }
                Ok(art) => {
                    print!("{}", render_report(&art, report_format));
                    if let Err(e) = runner::export(&art, export_graph.as_deref(), export_trace.as_deref()) {
                        eprintln!("error: {e}");
                        1
                    } else {
                        art.report.outcome.exit_code()
                    }
                }
            }
        }
        Command::Batch { dir, log_dir, seed } => batch(&dir, log_dir, seed),
        Command::Graph { logfile } => match read_file(&logfile) {
            Ok(records) => {
                print!("{}", history_graph(&records).to_dot());
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                1
            }
        },
    };
    ExitCode::from(code as u8)
}

fn batch(dir: &Path, log_dir: Option<PathBuf>, seed: Option<u64>) -> i32 {
    let mut files: Vec<PathBuf> = match fs::read_dir(dir) {
        Ok(entries) => entries
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect(),
        Err(e) => {
            eprintln!("error: {}: {e}", dir.display());
            return 1;
        }
    };
    files.sort();
    let options = RunOptions {
        log_dir,
        seed,
        ..Default::default()
    };
    let results: Vec<(PathBuf, Result<RunArtifacts, String>)> =
        files.par_iter().map(|p| (p.clone(), run_one(p, &options))).collect();

    println!(
        "{:<32} {:<14} {:<18} {:>7} {:>5} {:>5} {:>7} {:<6}",
        "scenario", "kind", "outcome", "retries", "alts", "comps", "advisor", "ledger"
    );
    let mut worst = 0;
    for (path, result) in &results {
        match result {
            Ok(art) => {
                let r = &art.report;
                println!(
                    "{:<32} {:<14} {:<18} {:>7} {:>5} {:>5} {:>7} {:<6}",
                    r.scenario,
                    r.kind,
                    r.outcome.as_str(),
                    r.counts.retries,
                    r.counts.alternatives_tried,
                    r.counts.compensations,
                    r.counts.advisor_calls,
                    if r.ledger.clean { "CLEAN" } else { "DIRTY" }
                );
                worst = worst.max(r.outcome.exit_code());
            }
            Err(e) => {
                let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                println!("{name:<32} CONFIG ERROR");
                eprintln!("error: {e}");
                worst = worst.max(1);
            }
        }
    }
    worst
}
