use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bsim", about = "Pilot-wave scenario runner and report verifier")]
struct Cli {
    /// Size of the worker thread pool (default: all cores). Outputs are
    /// byte-identical for any value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario config and write reports, CSVs, the final state and
    /// a SHA-256 manifest.
    Run {
        config: PathBuf,
        /// Override the output directory from the config.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Re-check an output directory's manifest and test aggregation.
    Verify { dir: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("bsim: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Run { config, output } => bohmsim::scenario::cmd_run(config, output.as_deref()),
        Command::Verify { dir } => bohmsim::scenario::cmd_verify(dir),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("bsim: one or more tests failed (reports written)");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("bsim: {e}");
            ExitCode::from(2)
        }
    }
}
