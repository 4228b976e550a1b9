mod elicit;
mod fetch;
mod service;
mod settings;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit 2: the invocation is wrong (bad flag value, missing input file).
/// Exit 1: the work itself failed.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

pub fn usage<T>(msg: impl Into<String>) -> Outcome<T> {
    Err(Failure::Usage(msg.into()))
}

/// Fails with a usage error naming `path` if it does not exist.
pub fn existing(path: &std::path::Path) -> Outcome<PathBuf> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        usage(format!("no such file or directory: {}", path.display()))
    }
}

#[derive(Parser)]
#[command(
    name = "vfm",
    version,
    about = "Variational factorization machines and preference elicitation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download or import MovieLens data and convert it to `u.data`/`u.item` form.
    FetchData(fetch::FetchArgs),
    /// Train a model and write checkpoint, history, metrics and config snapshot.
    Train(train::TrainArgs),
    /// Score a checkpoint on held-out data.
    Eval(train::EvalArgs),
    /// Simulated elicitation over a complete binary matrix.
    Elicit(elicit::ElicitArgs),
    /// Run the HTTP elicitation service.
    Serve(service::ServeArgs),
    /// Talk to a running service.
    #[command(subcommand)]
    Session(service::SessionCommand),
    /// Re-send a recorded request log and compare the responses.
    Replay(service::ReplayArgs),
}

/// Shared `--server` flag.
#[derive(Args, Clone)]
pub struct ServerUrl {
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    pub server: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn,vfm_server=info".into()),
        )
        .init();
    let result = match cli.command {
        Command::FetchData(a) => fetch::run(a),
        Command::Train(a) => train::run_train(a),
        Command::Eval(a) => train::run_eval(a),
        Command::Elicit(a) => elicit::run(a),
        Command::Serve(a) => service::serve(a),
        Command::Session(c) => service::session(c),
        Command::Replay(a) => service::replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
