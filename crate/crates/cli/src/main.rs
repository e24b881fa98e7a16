mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use merc_core::corpus::Split;

use commands::Stage;
use config::{Loaded, Overrides};

#[derive(Parser)]
#[command(name = "merc", version, about = "Behavior-aware multimodal emotion recognition in conversation")]
struct Cli {
    /// Run configuration file.
    #[arg(long, global = true, default_value = "merc.toml")]
    config: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Text-and-media baseline: no behavior alignment, no behaviors in prompts.
    #[arg(long, global = true)]
    baseline: bool,
    /// Behavior types to use, e.g. `facial,body,posture`, `all` or `none`.
    #[arg(long, global = true)]
    behaviors: Option<String>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Annotate utterances with behavior descriptions from the configured client.
    GenerateBehaviors {
        /// `train`, `dev`, `test`, a comma list, or `all`.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Behavior alignment (align), emotion tuning (merc), or both in sequence.
    Train {
        #[arg(long, value_enum, default_value = "both")]
        stage: Stage,
        /// Stage-A checkpoint to start emotion tuning from; defaults to the latest one.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Score a checkpoint on a split and write reports and plots.
    Evaluate {
        /// Defaults to the latest stage-B checkpoint in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Run the behavior ablation table instead.
        #[arg(long, conflicts_with_all = ["zero_shot", "checkpoint"])]
        ablation: bool,
        /// Query the zero-shot client instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        zero_shot: bool,
        /// With --zero-shot, include behavior descriptions in the prompts.
        #[arg(long, requires = "zero_shot")]
        with_behavior: bool,
    },
    /// Train and evaluate all five behavior ablation configurations.
    Ablate {
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Evaluate the untuned zero-shot client.
    ZeroShot {
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        with_behavior: bool,
    },
    /// Write a synthetic toy corpus, mock client scripts and a config.
    Fixture {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 32)]
        conversations: usize,
        #[arg(long, default_value = "happy,sad")]
        labels: String,
        /// Use a tiny decoder and few epochs.
        #[arg(long)]
        small: bool,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Command::Fixture { dir, conversations, labels, small } = &cli.command {
        return commands::fixture(dir, *conversations, labels, *small);
    }
    let overrides = Overrides { seed: cli.seed, output_dir: cli.output_dir.clone(), behaviors: cli.behaviors.clone() };
    let loaded = Loaded::load(&cli.config, &overrides)?;
    match cli.command {
        Command::GenerateBehaviors { split } => commands::generate_behaviors(&loaded, &commands::parse_splits(&split)?),
        Command::Train { stage, init } => commands::train(&loaded, stage, cli.baseline, init.as_deref()),
        Command::Evaluate { checkpoint, split, ablation, zero_shot, with_behavior } => {
            if ablation {
                commands::ablate(&loaded, split)
            } else if zero_shot {
                commands::zero_shot(&loaded, split, with_behavior)
            } else {
                commands::evaluate(&loaded, checkpoint.as_deref(), split, cli.baseline, cli.behaviors.is_some())
            }
        }
        Command::Ablate { split } => commands::ablate(&loaded, split),
        Command::ZeroShot { split, with_behavior } => commands::zero_shot(&loaded, split, with_behavior),
        Command::Fixture { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
