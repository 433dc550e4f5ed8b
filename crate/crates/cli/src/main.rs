mod augment;
mod config;
mod extract;
mod inspect;
mod toy;
mod weigh;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};

/// Fault-aware fine-tuning toolkit.
#[derive(Parser, Debug)]
#[command(name = "faft", version, about)]
struct Cli {
    /// JSON file whose keys mirror the flags of the subcommand; flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate similar-but-incorrect variants through a teacher model.
    Augment(augment::Args),
    /// Compute line, token and hybrid masks for every pair.
    Extract(extract::Args),
    /// Show one masked record with per-token annotations.
    Inspect(inspect::Args),
    /// Reference weights and losses from probability traces.
    Weigh(weigh::Args),
    /// Synthetic-corpus experiments on a small trigram model.
    #[command(subcommand)]
    Toy(toy::Command),
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: 1, error: error.into() }
    }

    pub fn data(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: 2, error: error.into() }
    }

    pub fn numeric(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: 3, error: error.into() }
    }
}

pub type CmdResult = Result<(), Failure>;

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => "error",
        (_, 0) => "warn",
        (_, 1) => "info",
        (_, 2) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
}

/// Usage line of the deepest subcommand named on the command line.
fn usage_for_args() -> clap::builder::StyledStr {
    let mut cmd = Cli::command();
    cmd.build();
    let mut current = &mut cmd;
    for arg in std::env::args().skip(1) {
        if current.find_subcommand(&arg).is_none() {
            continue;
        }
        current = current.find_subcommand_mut(&arg).expect("checked above");
    }
    current.render_usage()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            eprintln!("\n{}", usage_for_args());
            return ExitCode::from(1);
        }
    };
    init_logging(cli.verbose, cli.quiet);
    let config = match config::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Augment(args) => augment::run(&args, &config),
        Command::Extract(args) => extract::run(&args, &config),
        Command::Inspect(args) => inspect::run(&args, &config),
        Command::Weigh(args) => weigh::run(&args, &config),
        Command::Toy(cmd) => toy::run(&cmd, &config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
