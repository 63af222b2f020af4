use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use hollownet_cli::commands::{self, COMMANDS};
use hollownet_cli::config::RunConfig;

/// Personalize a diffusion U-Net with LoRA on a hollowed network.
///
/// Pipeline: pretrain, precompute, train, transfer, infer, analyze. Any config
/// key can be overridden after the command as `--section.key=value`.
#[derive(Parser)]
#[command(name = "hollownet", version)]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(value_parser = COMMANDS)]
    command: String,
    /// Overrides such as `--train.steps=300`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    hollownet_cli::tune_allocator();
    let result =
        RunConfig::load(cli.config.as_deref(), &cli.overrides).and_then(|cfg| commands::run(&cli.command, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
