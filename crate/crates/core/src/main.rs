use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use orthofactor::config::{parse_config, Command};
use orthofactor::pipeline::run_pipeline;
use orthofactor::Error;

#[derive(Parser)]
#[command(name = "orthofactor", version, about = "Sparse Bayesian factor models with normal or orthonormal factors")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the block-structured synthetic benchmark.
    Simulate(RunArgs),
    /// Find a posterior mode and run the Gibbs chains.
    Fit(RunArgs),
    /// Recompute summaries and densities from a finished fit.
    Diagnose(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), Error> {
    let (expected, args) = match cli.command {
        Cmd::Simulate(a) => (Command::Simulate, a),
        Cmd::Fit(a) => (Command::Fit, a),
        Cmd::Diagnose(a) => (Command::Diagnose, a),
    };
    let mut cfg = parse_config(&args.config)?;
    if cfg.command != expected {
        return Err(Error::Config {
            key: "command".into(),
            line: 0,
            message: format!("config says \"{}\" but the CLI was asked to {}", cfg.command.as_str(), expected.as_str()),
        });
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
        cfg.simulation.seed = s;
    }
    if let Some(o) = args.output_dir {
        cfg.output_dir = o;
    }
    run_pipeline(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
