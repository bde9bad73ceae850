use std::io::{BufRead, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use spangate::data_forge::{read_jsonl, to_jsonl, SftRecord};
use spangate::decode::{decode_with, make_noise_source, DecodeConfig, DecodeError, LogitSource, Strategy};
use spangate::metrics::{corpus_reports, parse_prediction, PredictionSet};
use spangate::validate::Validator;
use spangate::{CompiledSchema, Grammar, Schema, SpanTrie, Task, Vocab};

use crate::data::{SCHEMA_FILE, VOCAB_FILE};
use crate::{load_model, load_schema, load_vocab, sibling, write_text, Invariant, ModelArgs, Switch, Usage};

#[derive(Args, Debug)]
pub struct DecodeArgs {
    /// Records to decode (JSONL with instruction, context, output)
    #[arg(long = "in", value_name = "PATH")]
    input: PathBuf,
    /// Predictions JSONL
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predictions written by `decode`
    #[arg(long = "in", value_name = "PATH")]
    input: PathBuf,
    /// Gold records, in the same order
    #[arg(long, value_name = "PATH")]
    gold: PathBuf,
    /// Schema JSON; defaults to schema.json next to the gold file
    #[arg(long, value_name = "PATH")]
    schema: Option<PathBuf>,
    /// Also write the report here
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReplArgs {
    /// Directory holding schema.json and vocab.json
    #[arg(long = "in", value_name = "DIR", default_value = ".")]
    input: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

/// One line of a predictions file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub instruction: String,
    pub context: String,
    pub output: String,
    /// Passed the independent validator.
    pub valid: bool,
    /// Hit `max_len` before finishing.
    pub truncated: bool,
}

/// Everything needed to decode one query.
struct Session {
    vocab: Vocab,
    schema: Schema,
    compiled: Arc<CompiledSchema>,
    source: Box<dyn LogitSource>,
    max_len: usize,
}

impl Session {
    fn open(args: &ModelArgs, base: &Path) -> Result<Self> {
        let schema = load_schema(&args.schema.clone().unwrap_or_else(|| base.join(SCHEMA_FILE)))?;
        let vocab = load_vocab(&args.vocab.clone().unwrap_or_else(|| base.join(VOCAB_FILE)))?;
        let source: Box<dyn LogitSource> = match &args.model {
            Some(path) => Box::new(load_model(path, &vocab)?),
            None => Box::new(make_noise_source(args.seed, vocab.len())),
        };
        if args.max_len == 0 {
            return Err(Usage("--max-len must be at least 1".into()).into());
        }
        let compiled = Arc::new(CompiledSchema::new(&vocab, &schema)?);
        Ok(Self { vocab, schema, compiled, source, max_len: args.max_len })
    }

    /// Decoded text and whether decoding finished.
    fn run(&self, instruction: &str, context: &str, constraints: bool) -> Result<(String, bool)> {
        let prompt = self.vocab.encode(&format!("{instruction} {context}"))?;
        let ctx = self.vocab.encode(context)?;
        let grammar = Grammar::new(self.compiled.clone(), SpanTrie::build(ctx)?)?;
        let cfg = DecodeConfig { strategy: Strategy::Greedy, max_len: self.max_len, constraints };
        let (tokens, finished) = match decode_with(&*self.source, &self.vocab, &grammar, &prompt, &cfg) {
            Ok(out) => (out.tokens, true),
            Err(DecodeError::Truncated { partial, .. }) => (partial, false),
            Err(e) => return Err(e.into()),
        };
        Ok((self.vocab.decode(&tokens)?, finished))
    }

    fn check(&self, context: &str, text: &str) -> Result<()> {
        let ctx = self.vocab.encode(context)?;
        Validator::new(&self.vocab, &self.schema, &ctx).check(text)?;
        Ok(())
    }
}

pub fn decode(args: &DecodeArgs) -> Result<()> {
    let session = Session::open(&args.model, &sibling(&args.input, ""))?;
    let records: Vec<SftRecord> =
        read_jsonl(&args.input).with_context(|| format!("cannot read {}", args.input.display()))?;
    let constraints = args.model.constraints.is_on();
    let mut preds = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let (output, finished) =
            session.run(&rec.instruction, &rec.context, constraints).with_context(|| format!("record {}", i + 1))?;
        let valid = finished && session.check(&rec.context, &output).is_ok();
        if constraints && finished && !valid {
            let reason = session.check(&rec.context, &output).unwrap_err();
            return Err(Invariant(format!("record {}: constrained output {output:?} rejected: {reason:#}", i + 1)).into());
        }
        preds.push(Prediction {
            instruction: rec.instruction.clone(),
            context: rec.context.clone(),
            output,
            valid,
            truncated: !finished,
        });
    }
    write_text(&args.out, &to_jsonl(&preds))?;
    let valid = preds.iter().filter(|p| p.valid).count();
    let truncated = preds.iter().filter(|p| p.truncated).count();
    println!("decoded {} records: {valid} valid, {truncated} truncated", preds.len());
    Ok(())
}

fn empty_set(task: Task) -> PredictionSet {
    match task {
        Task::Ner => PredictionSet::Entities(Vec::new()),
        Task::Re => PredictionSet::Relations(Vec::new()),
        Task::Ee => PredictionSet::Events(Vec::new()),
    }
}

fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}: malformed prediction", path.display(), i + 1)))
        .collect()
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let schema = load_schema(&args.schema.clone().unwrap_or_else(|| sibling(&args.gold, SCHEMA_FILE)))?;
    let preds = read_predictions(&args.input)?;
    let gold: Vec<SftRecord> = read_jsonl(&args.gold).with_context(|| format!("cannot read {}", args.gold.display()))?;
    if preds.len() != gold.len() {
        anyhow::bail!("{} holds {} predictions but {} holds {} gold records", args.input.display(), preds.len(), args.gold.display(), gold.len());
    }
    let mut gold_sets = Vec::with_capacity(gold.len());
    for (i, g) in gold.iter().enumerate() {
        gold_sets.push(parse_prediction(&g.output, &schema).with_context(|| format!("gold record {}", i + 1))?);
    }
    let pred_sets: Vec<PredictionSet> = preds
        .iter()
        .map(|p| {
            let parsed = if p.valid { parse_prediction(&p.output, &schema).ok() } else { None };
            parsed.unwrap_or_else(|| empty_set(schema.task))
        })
        .collect();
    let reports = corpus_reports(gold_sets.iter().zip(&pred_sets));
    let json = serde_json::to_string_pretty(&reports)? + "\n";
    if let Some(out) = &args.out {
        write_text(out, &json)?;
    }
    print!("{json}");
    Ok(())
}

const REPL_HELP: &str = "enter an instruction line, then a context line; :constraints on|off, :quit";

pub fn repl(args: &ReplArgs) -> Result<()> {
    let session = Session::open(&args.model, &args.input)?;
    let mut constraints = args.model.constraints.is_on();
    let interactive = std::io::stdin().is_terminal();
    let stdin = std::io::stdin();
    let mut lines = stdin.lock().lines();
    let mut stdout = std::io::stdout();
    let mut prompt = |label: &str| -> Result<()> {
        if interactive {
            write!(stdout, "{label}> ")?;
            stdout.flush()?;
        }
        Ok(())
    };
    if interactive {
        println!("{REPL_HELP}");
    }
    loop {
        prompt("instruction")?;
        let Some(line) = lines.next() else { break };
        let instruction = line?.trim().to_string();
        if instruction.is_empty() {
            continue;
        }
        if let Some(cmd) = instruction.strip_prefix(':') {
            match cmd.split_whitespace().collect::<Vec<_>>().as_slice() {
                ["quit"] | ["q"] => break,
                ["constraints", "on"] => constraints = Switch::On.is_on(),
                ["constraints", "off"] => constraints = Switch::Off.is_on(),
                ["constraints"] => println!("constraints {}", if constraints { "on" } else { "off" }),
                _ => println!("unknown command :{cmd}; {REPL_HELP}"),
            }
            if cmd.starts_with("constraints ") {
                println!("constraints {}", if constraints { "on" } else { "off" });
            }
            continue;
        }
        prompt("context")?;
        let Some(line) = lines.next() else { break };
        let context = line?;
        match session.run(&instruction, &context, constraints) {
            Ok((text, finished)) => {
                println!("{text}");
                if !finished {
                    println!("! invalid: truncated at {} tokens", session.max_len);
                } else if let Err(e) = session.check(&context, &text) {
                    if constraints {
                        return Err(Invariant(format!("constrained output {text:?} rejected: {e:#}")).into());
                    }
                    println!("! invalid: {e:#}");
                }
            }
            Err(e) => println!("! error: {e:#}"),
        }
    }
    Ok(())
}
