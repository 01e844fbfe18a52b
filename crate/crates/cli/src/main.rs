use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tod_cli::commands::{cmd_chat, cmd_evaluate, cmd_gen_data, cmd_pipeline, cmd_pretrain};
use tod_cli::{CliError, Overrides, RunConfig};

/// Task-oriented dialogue toolkit.
///
/// Exit codes: 0 ok, 1 training or generation failure, 2 config or data
/// error, 3 I/O error, 4 missing artifact.
#[derive(Parser)]
#[command(name = "tod", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with gold annotations and local KBs.
    GenData(Common),
    /// Contrastively pretrain the sentence encoder; writes vocab.json and encoder.ckpt.
    Pretrain(Common),
    /// Pretrain, run weak supervision, train the LM, evaluate on the test split.
    Pipeline(Common),
    /// Score a predictions JSONL file against the corpus test split.
    Evaluate(Common),
    /// Interactive session against trained checkpoints (`:kb`, `:reset`, `:quit`).
    Chat(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration. Flags override file values, which override defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for both corpus generation (data.seed) and training (system.seed).
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Leave the encoder randomly initialized instead of pretraining it.
    #[arg(long)]
    skip_pretrain: bool,
    /// Output root; corpus, checkpoints and reports default to paths under it.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<RunConfig, CliError> {
        let overrides = Overrides { seed: self.seed, skip_pretrain: self.skip_pretrain, out: self.out.clone() };
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(c) => cmd_gen_data(&c.config()?),
        Command::Pretrain(c) => cmd_pretrain(&c.config()?),
        Command::Pipeline(c) => cmd_pipeline(&c.config()?),
        Command::Evaluate(c) => cmd_evaluate(&c.config()?),
        Command::Chat(c) => cmd_chat(&c.config()?, io::stdin().lock(), io::stdout().lock()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
