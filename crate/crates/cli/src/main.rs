//! `hulm`: generate corpora, pre-train and fine-tune models, evaluate and
//! compare runs. Every command writes into its own run directory with a
//! `manifest.json` recording the resolved configuration and file hashes.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod rundir;

#[derive(Parser, Debug)]
#[command(name = "hulm", version, about = "Human-context language modeling experiments")]
struct Cli {
    /// Print a machine-readable JSON summary on stdout.
    #[arg(long, global = true)]
    json: bool,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct OutArgs {
    /// Run directory to create.
    #[arg(long)]
    pub out: PathBuf,

    /// Replace the contents of an existing non-empty run directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus split into train/dev/test by author.
    Generate(commands::generate::GenerateArgs),
    /// Pre-train a model under one of the human-context regimes.
    Pretrain(commands::pretrain::PretrainArgs),
    /// Fine-tune a pre-trained checkpoint on a user- or document-level task.
    Finetune(commands::finetune::FinetuneArgs),
    /// Continue a group+individual checkpoint with a new regression attribute.
    Transfer(commands::transfer::TransferArgs),
    /// Score a checkpoint on a corpus split, or score prediction files.
    Evaluate(commands::evaluate::EvaluateArgs),
    /// Build a comparison table over evaluated runs.
    Compare(commands::compare::CompareArgs),
}

/// Exit status by error class: 2 configuration/validation, 3 data,
/// 4 numeric failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    use hulm_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::Contract(_) | E::Dimension { .. } => 2,
                E::Data(_) | E::Parse { .. } | E::Vocabulary { .. } | E::Io(_) => 3,
                E::NumericDomain { .. } | E::UndefinedMetric(_) => 4,
            };
        }
        if cause.is::<toml::de::Error>() {
            return 2;
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Generate(a) => commands::generate::run(a),
        Command::Pretrain(a) => commands::pretrain::run(a),
        Command::Finetune(a) => commands::finetune::run(a),
        Command::Transfer(a) => commands::transfer::run(a),
        Command::Evaluate(a) => commands::evaluate::run(a),
        Command::Compare(a) => commands::compare::run(a),
    };
    match result {
        Ok(out) => {
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&out.json).expect("summary serializes"));
            } else {
                print!("{}", out.text);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
