//! `umtn` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! error. Failures print a single JSON object on stderr.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use umtn::{Error, ErrorClass};

#[derive(Debug, Parser)]
#[command(name = "umtn", version, about = "RBF collocation and multilevel spatiotemporal forecasting")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Seed overriding the one in the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic convection-diffusion dataset, or ingest CSV tables.
    GenData(commands::GenDataArgs),
    /// Select a kernel shape parameter by leave-one-out cross-validation.
    TuneKernel(commands::TuneKernelArgs),
    /// Run the RBF collocation solver on a linear PDE.
    Solve(commands::SolveArgs),
    /// Train a forecasting model and write a checkpoint.
    Train(commands::TrainArgs),
    /// Score a checkpoint on a dataset split against persistence.
    Eval(commands::EvalArgs),
    /// Forecast one sequence with a checkpoint.
    Predict(commands::PredictArgs),
    /// Summarize evaluation reports as a Markdown or JSON table.
    ExportReport(commands::ExportReportArgs),
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}

fn class_name(class: ErrorClass) -> &'static str {
    match class {
        ErrorClass::Config => "config",
        ErrorClass::Data => "data",
        ErrorClass::Numerical => "numerical",
    }
}

fn report(kind: &str, class: ErrorClass, message: &str) -> ExitCode {
    let body = serde_json::json!({
        "error": { "kind": kind, "class": class_name(class), "message": message }
    });
    eprintln!("{body}");
    ExitCode::from(exit_code(class))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report("usage", ErrorClass::Config, e.to_string().trim()),
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result: Result<(), Error> = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::TuneKernel(a) => commands::tune_kernel(a),
        Command::Solve(a) => commands::solve(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::ExportReport(a) => commands::export_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e.kind(), e.class(), &e.to_string()),
    }
}
