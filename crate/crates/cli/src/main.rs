mod bench;
mod candidates;
mod separate;
mod serve;
mod stats;
mod train;

use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "refsep", version, about = "User-assisted reflection separation with a GMM patch prior")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a GMM patch prior on a directory of images.
    Train(train::Args),
    /// Gradient statistics of an image corpus.
    Stats(stats::Args),
    /// Rank candidate decompositions of one 8x8 patch.
    Candidates(candidates::Args),
    /// Separate an image into two layers.
    Separate(separate::Args),
    /// Paired separation benchmark on synthetic mixtures.
    Bench(bench::Args),
    /// Serve the HTTP API used by the annotation UI.
    Serve(serve::Args),
}

/// Bad input or usage; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(e: impl fmt::Display) -> anyhow::Error {
    anyhow::Error::new(UsageError(e.to_string()))
}

/// Core errors caused by the caller's input count as usage errors.
pub fn classify(e: refsep_core::Error) -> anyhow::Error {
    use refsep_core::Error as E;
    match e {
        E::InvalidInput(_) | E::Format(_) | E::Image(_) | E::Io(_) | E::Json(_) => usage(e),
        other => anyhow::Error::new(other),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Train(a) => train::run(a),
        Command::Candidates(a) => candidates::run(a),
        Command::Stats(a) => stats::run(a),
        Command::Separate(a) => separate::run(a),
        Command::Bench(a) => bench::run(a),
        Command::Serve(a) => serve::run(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("REFSEP_LOG", "info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
