//! `hybridwarp`: generate phantom datasets, train and evaluate the joint
//! segmentation/registration networks, and run the metrics from scripts.
//!
//! Machine-readable output is JSON on stdout; tables, warnings and errors go
//! to stderr. Exit codes: 0 success, 2 bad arguments, 3 I/O or format
//! failure, 4 training divergence, 5 missing inputs or mismatched samples.

mod cmd;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "hybridwarp",
    version,
    about = "Joint segmentation and deformable registration of longitudinal volumes"
)]
struct Cli {
    /// Worker threads for the numeric kernels and evaluation.
    #[arg(long, global = true, env = "HYBRIDWARP_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic longitudinal dataset (HVOL volumes + manifest.json).
    Generate(cmd::GenerateArgs),
    /// Train in hybrid, segnet or regnet mode.
    Train(cmd::TrainArgs),
    /// Evaluate a checkpoint on a dataset and write an evaluation report.
    Eval(cmd::EvalArgs),
    /// Warp an HVOL volume with a displacement field.
    Warp(cmd::WarpArgs),
    /// Single metrics for scripting.
    #[command(subcommand)]
    Metrics(cmd::MetricsCommand),
    /// Paired t-tests between two evaluation reports.
    Compare(cmd::CompareArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Generate(a) => cmd::generate(a),
        Command::Train(a) => cmd::train(a),
        Command::Eval(a) => cmd::eval(a),
        Command::Warp(a) => cmd::warp(a),
        Command::Metrics(m) => cmd::metrics(m),
        Command::Compare(a) => cmd::compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", cmd::describe(&e));
            ExitCode::from(cmd::exit_code(&e))
        }
    }
}
