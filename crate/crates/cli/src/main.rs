mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{Overrides, RunConfig};

/// Train and evaluate TREND temporal graph models.
///
/// Every key of the configuration file can be overridden by the flag of the
/// same name (underscores become dashes). The output directory can also be
/// set with the TREND_OUT_DIR environment variable, which wins over both.
#[derive(Debug, Parser)]
#[command(name = "trend", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on the events up to the split time; writes a checkpoint, the loss history and a config snapshot.
    Train(RunArgs),
    /// Temporal link prediction on the held-out events.
    EvalLink(RunArgs),
    /// Node-dynamics regression on the held-out events.
    EvalNode(RunArgs),
    /// Generate a planted-community Hawkes graph (events.txt, features.txt).
    GenSynth(RunArgs),
    /// Compare analytic and finite-difference gradients on a frozen batch.
    GradCheck(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let (args, run): (&RunArgs, fn(&RunConfig) -> trend_core::Result<()>) = match &cli.command {
        Command::Train(a) => (a, commands::cmd_train),
        Command::EvalLink(a) => (a, commands::cmd_eval_link),
        Command::EvalNode(a) => (a, commands::cmd_eval_node),
        Command::GenSynth(a) => (a, commands::cmd_gen_synth),
        Command::GradCheck(a) => (a, commands::cmd_grad_check),
    };
    let result = RunConfig::resolve(args.config.as_deref(), &args.overrides).and_then(|c| run(&c));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
