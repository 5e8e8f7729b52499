use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Federated unlearning experiment runner.
#[derive(Parser)]
#[command(name = "fedosd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured (algorithm, seed) pair and write records,
    /// summaries, and checkpoints under the output directory.
    Run {
        /// Path to the TOML configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides output_dir from the config.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Overwrite run directories left by a previous invocation.
        #[arg(long)]
        force: bool,
        /// Replace the configured seed list with this single seed.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Render asr.svg, racc.svg, and dist.svg from recorded runs.
    Plot {
        /// Results directory holding <algorithm>/<seed>/records.csv.
        #[arg(long)]
        output: PathBuf,
    },
    /// Parse a configuration and echo the resolved document.
    Validate {
        /// Path to the TOML configuration.
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, output, force, seed_override } => {
            fedosd_cli::cmd_run(config, output.as_deref(), *force, *seed_override)
        }
        Command::Plot { output } => fedosd_cli::cmd_plot(output),
        Command::Validate { config } => fedosd_cli::cmd_validate(config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(fedosd_cli::exit_code(&e) as u8)
        }
    }
}
