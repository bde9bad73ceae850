//! `spangate`: data generation, toy training, constrained decoding,
//! evaluation and an interactive extraction REPL.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 internal invariant breach.

mod data;
mod run;
mod train;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use spangate::grammar::Schema;
use spangate::losses::{TinySoftmaxLM, TrainError};
use spangate::pipeline::PipelineError;
use spangate::Vocab;

#[derive(Parser, Debug)]
#[command(name = "spangate", version, about = "Span-grounded constrained extraction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus and write SFT, RM and RL splits
    GenSynthetic(data::GenArgs),
    /// Split an existing SFT JSONL file and derive RM and RL files
    BuildData(data::BuildArgs),
    /// Train one stage of the toy pipeline
    Train(train::TrainArgs),
    /// Decode every record of a JSONL file
    Decode(run::DecodeArgs),
    /// Score predictions against gold records
    Eval(run::EvalArgs),
    /// Interactive extraction session on stdin
    Repl(run::ReplArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn is_on(self) -> bool {
        self == Switch::On
    }
}

/// Flags shared by commands that decode.
#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Schema JSON; defaults to schema.json next to the input
    #[arg(long, value_name = "PATH")]
    schema: Option<PathBuf>,
    /// Vocabulary JSON; defaults to vocab.json next to the input
    #[arg(long, value_name = "PATH")]
    vocab: Option<PathBuf>,
    /// Model checkpoint; without it a seeded uniform-noise model is used
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    constraints: Switch,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    max_len: usize,
}

/// Wrong flags or flag combinations (exit 1).
#[derive(Debug)]
pub struct Usage(pub String);

/// A broken internal guarantee (exit 3).
#[derive(Debug)]
pub struct Invariant(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for Invariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invariant violated: {}", self.0)
    }
}

impl std::error::Error for Usage {}
impl std::error::Error for Invariant {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if cause.is::<Invariant>() {
            return 3;
        }
        let mutated = |e: &TrainError| matches!(e, TrainError::ReferenceMutated);
        if cause.downcast_ref::<TrainError>().is_some_and(mutated) {
            return 3;
        }
        if let Some(PipelineError::Train(e)) = cause.downcast_ref::<PipelineError>() {
            if mutated(e) {
                return 3;
            }
        }
    }
    2
}

pub fn load_schema(path: &Path) -> Result<Schema> {
    Schema::load(path).with_context(|| format!("cannot load schema {}", path.display()))
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    Vocab::load(path).with_context(|| format!("cannot load vocabulary {}", path.display()))
}

pub fn load_model(path: &Path, vocab: &Vocab) -> Result<TinySoftmaxLM> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read checkpoint {}", path.display()))?;
    let model: TinySoftmaxLM =
        serde_json::from_str(&text).with_context(|| format!("malformed checkpoint {}", path.display()))?;
    if model.params.len() != model.config.param_count() {
        anyhow::bail!(
            "checkpoint {} holds {} parameters, its config needs {}",
            path.display(),
            model.params.len(),
            model.config.param_count()
        );
    }
    if model.config.vocab_size != vocab.len() {
        anyhow::bail!(
            "checkpoint {} covers {} tokens, the vocabulary has {}",
            path.display(),
            model.config.vocab_size,
            vocab.len()
        );
    }
    Ok(model)
}

pub fn save_model(path: &Path, model: &TinySoftmaxLM) -> Result<()> {
    write_text(path, &(serde_json::to_string(model)? + "\n"))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// `name` inside the directory holding `file`.
pub fn sibling(file: &Path, name: &str) -> PathBuf {
    file.parent().unwrap_or(Path::new(".")).join(name)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenSynthetic(a) => data::gen_synthetic(&a),
        Command::BuildData(a) => data::build_data(&a),
        Command::Train(a) => train::train(&a),
        Command::Decode(a) => run::decode(&a),
        Command::Eval(a) => run::eval(&a),
        Command::Repl(a) => run::repl(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
