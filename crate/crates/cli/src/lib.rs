//! `graphtext` command-line driver: synthetic corpora, pre-training,
//! zero-shot, few-shot and conditional prompting, and protocol evaluation.

pub mod checkpoint;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use graphtext_core::eval::Method;
use graphtext_core::{Error, Result};

use crate::config::{Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "graphtext", version, about = "Graph-grounded pre-training and prompting for low-resource text classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// JSON run configuration; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus directory.
    Synth(RunArgs),
    /// Pre-train the text and graph encoders on a corpus.
    Pretrain(RunArgs),
    /// Classify with discrete templates only.
    Zeroshot(RunArgs),
    /// Tune continuous prompts on few-shot tasks.
    Fewshot(RunArgs),
    /// Tune node-conditioned prompts on few-shot tasks.
    Conditional(RunArgs),
    /// Run the method named by `method` under the configured protocol.
    Eval(RunArgs),
}

pub const EXIT_ARGUMENT: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

/// Process exit status for a failed command.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Parameter(_) | Error::Template(_) => EXIT_ARGUMENT,
        Error::NonFinite(_) => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let (args, method) = match &cli.command {
        Command::Synth(a) | Command::Pretrain(a) | Command::Eval(a) => (a, None),
        Command::Zeroshot(a) => (a, Some(Method::ZeroDiscrete)),
        Command::Fewshot(a) => (a, Some(Method::FewshotStatic)),
        Command::Conditional(a) => (a, Some(Method::Conditional)),
    };
    let config = RunConfig::resolve(args.config.as_deref(), &args.overrides)?;
    match &cli.command {
        Command::Synth(_) => commands::cmd_synth(&config).map(drop),
        Command::Pretrain(_) => commands::cmd_pretrain(&config).map(drop),
        _ => commands::cmd_evaluate(&config, method.unwrap_or(config.method)).map(drop),
    }
}
