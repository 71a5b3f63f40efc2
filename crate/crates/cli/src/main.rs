mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};


#[derive(Parser)]
#[command(name = "blocktr1", version, about = "Inexact SQP and RTI experiments on optimal control problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the configured problem once per strategy and log every iteration.
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use lifted collocation instead of RK4 multiple shooting.
        #[arg(long)]
        lifted: bool,
    },
    /// Time the preparation and feedback phases over a range of chain lengths.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Chain lengths, as `2..8` (inclusive), `2..=8` or `2,4,6`.
        #[arg(long)]
        nm_sweep: Option<String>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop RTI simulation, one trace per controller variant.
    Nmpc {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated strategies; defaults to the config's list.
        #[arg(long)]
        variants: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve { config, out, lifted } => commands::solve(&config, out, lifted),
        Command::Bench {
            config,
            nm_sweep,
            reps,
            out,
        } => commands::bench(&config, nm_sweep.as_deref(), reps, out),
        Command::Nmpc { config, variants, out } => commands::nmpc(&config, variants.as_deref(), out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
