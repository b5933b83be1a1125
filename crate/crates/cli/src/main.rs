//! `adsandbox` command-line entry point.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Settings;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments or configuration. Exit code 2.
    #[error("{0}")]
    Usage(String),
    /// The evaluation itself failed. Exit code 1.
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "adsandbox", version, about = "Closed-loop adversarial testing for driving stacks")]
struct Cli {
    /// JSON config file using the flag names as keys (also ADSANDBOX_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    settings: Settings,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic dataset, built-in maps and seed scenarios.
    MakeAssets,
    /// Train the reference classifier and save a stack directory.
    Train,
    /// Run one closed-loop episode and write its record and metrics.
    Run,
    /// Accuracy of a stack under digital attacks on a held-out set.
    AttackEval,
    /// Evolve a seed scenario toward higher risk.
    Evolve,
    /// Re-simulate a record and report the first divergent tick.
    Replay {
        record: PathBuf,
        /// Also write one camera frame per tick under `<out>/frames`.
        #[arg(long)]
        render: bool,
    },
    /// Serve interactive sessions over WebSocket.
    Serve {
        /// Print the session message schema and exit.
        #[arg(long)]
        schema: bool,
    },
    /// Run the reference HIL executor.
    Executor,
    /// Group records by label and print the metrics table.
    Aggregate { records: Vec<PathBuf> },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let run = || -> Result<(), CliError> {
        let s = config::resolve(cli.settings, cli.config.as_deref(), |k| std::env::var(k).ok())?;
        match cli.command {
            Command::MakeAssets => commands::make_assets(&s),
            Command::Train => commands::train(&s),
            Command::Run => commands::run(&s),
            Command::AttackEval => commands::attack_eval(&s),
            Command::Evolve => commands::evolve(&s),
            Command::Replay { record, render } => commands::replay(&s, &record, render),
            Command::Serve { schema } => commands::serve(&s, schema),
            Command::Executor => commands::executor(&s),
            Command::Aggregate { records } => commands::aggregate(&s, &records),
        }
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
