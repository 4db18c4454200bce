use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use mfqp_cli::RunError;

#[derive(Parser)]
#[command(name = "mfqp", about = "Reproducible experiments for mean-field particle systems", disable_version_flag = true)]
struct Cli {
    /// Worker threads for parallel sections (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory, overriding `output_dir` in the config.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run { config: PathBuf },
    /// Check a config file without running anything.
    Validate { config: PathBuf },
    /// Print version information.
    Version,
}

fn fail(e: &RunError) -> ExitCode {
    let code = e.exit_code();
    let report = json!({ "status": "error", "reason": e.reason(), "message": e.to_string(), "exit_code": code });
    eprintln!("{report}");
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        eprintln!("{}", json!({ "status": "error", "reason": "invalid_threads", "message": "--threads must be at least 1" }));
        return ExitCode::from(2);
    }
    // Only fails if a global pool already exists, which cannot happen here.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();

    match cli.command {
        Command::Version => {
            println!("mfqp {} (rng {})", mfqp_cli::VERSION, mfqp::simulator::ALGORITHM);
            ExitCode::SUCCESS
        }
        Command::Validate { config } => match mfqp_cli::validate(&config) {
            Ok(report) => {
                println!("{}", serde_json::to_string_pretty(&report).expect("plain json"));
                if report.valid {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(2)
                }
            }
            Err(e) => fail(&e),
        },
        Command::Run { config } => match mfqp_cli::run(&config, cli.output.as_deref(), threads) {
            Ok(summary) => {
                println!("{}", json!({ "status": "ok", "output_dir": summary.output_dir, "files": summary.files }));
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
    }
}
