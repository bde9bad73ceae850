use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use spangate::data_forge::{read_jsonl, to_jsonl, RmRecord, SftRecord, Split, Stage};
use spangate::losses::{pairwise_accuracy, validity_rate, LogRow, TinySoftmaxLM};
use spangate::pipeline::{encode_all, encode_pairs, rm_training_pairs, run_rl, run_rm, run_sft, ToyConfig};

use crate::data::{split_file, SCHEMA_FILE, VOCAB_FILE};
use crate::{load_model, load_schema, load_vocab, save_model, write_text, Usage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Sft,
    Rm,
    Rl,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    /// Data directory written by gen-synthetic or build-data
    #[arg(long = "in", value_name = "DIR")]
    input: PathBuf,
    /// Checkpoint directory; defaults to the data directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Schema JSON; defaults to the one in the data directory
    #[arg(long, value_name = "PATH")]
    schema: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// KL weight of the RL stage
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    /// Override the stage's epoch budget
    #[arg(long)]
    epochs: Option<usize>,
}

const SFT_CKPT: &str = "sft.json";
const RM_CKPT: &str = "rm.json";
const RL_CKPT: &str = "rl.json";

fn snapshot_file(epoch: usize) -> String {
    format!("sft.snapshot-{epoch}.json")
}

fn read<R: spangate::data_forge::JsonlRecord>(dir: &Path, stage: Stage, split: Split) -> Result<Vec<R>> {
    let path = dir.join(split_file(stage, split));
    read_jsonl(&path).with_context(|| format!("cannot read {}", path.display()))
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Usage(format!("{} not found; {hint}", path.display())).into())
    }
}

pub fn train(args: &TrainArgs) -> Result<()> {
    if !(args.beta >= 0.0 && args.beta.is_finite()) {
        return Err(Usage(format!("--beta must be a finite non-negative number, got {}", args.beta)).into());
    }
    let data = &args.input;
    let out = args.out.clone().unwrap_or_else(|| data.clone());
    std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let schema = load_schema(&args.schema.clone().unwrap_or_else(|| data.join(SCHEMA_FILE)))?;
    let vocab = load_vocab(&data.join(VOCAB_FILE))?;
    let mut cfg = ToyConfig::new(args.seed);
    cfg.rl.beta = args.beta;
    if let Some(n) = args.epochs {
        cfg.sft.epochs = n;
        cfg.rm.epochs = n;
        cfg.rl.epochs = n;
    }
    match args.stage {
        StageArg::Sft => {
            let records: Vec<SftRecord> = read(data, Stage::Sft, Split::Train)?;
            let run = run_sft(&vocab, &schema, &records, &cfg)?;
            save_model(&out.join(SFT_CKPT), &run.model)?;
            let reached = cfg.snapshot_epochs.iter().filter(|&&e| e <= run.log.len());
            for (epoch, snap) in reached.zip(&run.snapshots) {
                save_model(&out.join(snapshot_file(*epoch)), snap)?;
            }
            write_text(&out.join("sft.log.jsonl"), &to_jsonl(&run.log))?;
            println!("sft: {} epochs, train exact-match {:.4}", run.log.len(), run.exact_match);
        }
        StageArg::Rm => {
            let sft_path = out.join(SFT_CKPT);
            require(&sft_path, "run `train --stage sft` first")?;
            let sft = load_model(&sft_path, &vocab)?;
            let mut generators: Vec<TinySoftmaxLM> = Vec::new();
            for &e in &cfg.snapshot_epochs {
                let p = out.join(snapshot_file(e));
                if p.is_file() {
                    generators.push(load_model(&p, &vocab)?);
                }
            }
            generators.push(sft.clone());
            let records: Vec<SftRecord> = read(data, Stage::Sft, Split::Train)?;
            let confusion: Vec<RmRecord> = read(data, Stage::Rm, Split::Train)?;
            let held_out: Vec<RmRecord> = read(data, Stage::Rm, Split::Dev)?;
            let gens: Vec<&TinySoftmaxLM> = generators.iter().collect();
            let pairs = rm_training_pairs(&vocab, &schema, &records, &confusion, &gens, &cfg)?;
            write_text(&out.join("rm.pairs.jsonl"), &to_jsonl(&pairs))?;
            let run = run_rm(&sft, &vocab, &pairs, &cfg)?;
            let acc = pairwise_accuracy(&run.model, &encode_pairs(&vocab, &held_out)?);
            save_model(&out.join(RM_CKPT), &run.model)?;
            let mut log = run.log;
            if let Some(last) = log.last_mut() {
                last.extra.insert("held_out_accuracy".into(), acc);
            }
            write_text(&out.join("rm.log.jsonl"), &to_jsonl(&log))?;
            println!("rm: {} pairs ({} confusion), held-out pairwise accuracy {acc:.4}", pairs.len(), confusion.len());
        }
        StageArg::Rl => {
            let sft_path = out.join(SFT_CKPT);
            require(&sft_path, "RL needs an SFT checkpoint; run `train --stage sft` first")?;
            let rm_path = out.join(RM_CKPT);
            require(&rm_path, "RL needs a reward model; run `train --stage rm` first")?;
            let sft = load_model(&sft_path, &vocab)?;
            let rm = load_model(&rm_path, &vocab)?;
            let prompts: Vec<SftRecord> = read(data, Stage::Rl, Split::Train)?;
            let probe: Vec<SftRecord> = read(data, Stage::Rl, Split::Dev)?;
            let run = run_rl(&sft, &rm, &vocab, &schema, &prompts, &probe, &cfg)?;
            let probe_ex = encode_all(&vocab, &probe)?;
            let before = validity_rate(&sft, &vocab, &schema, &probe_ex, cfg.rl.max_len)?;
            let after = validity_rate(&run.model, &vocab, &schema, &probe_ex, cfg.rl.max_len)?;
            save_model(&out.join(RL_CKPT), &run.model)?;
            write_text(&out.join("rl.log.jsonl"), &to_jsonl(&run.log))?;
            let reward = |r: Option<&LogRow>| r.and_then(|r| r.extra.get("reward").copied()).unwrap_or(f64::NAN);
            println!(
                "rl: probe reward {:.4} -> {:.4}, unconstrained validity {before:.4} -> {after:.4}",
                reward(run.log.first()),
                reward(run.log.last())
            );
        }
    }
    Ok(())
}
