use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use spangate::data_forge::{
    build_rm_records, corpus_stats, corpus_vocab, gen_synthetic_with, read_jsonl, split_records, sub_seed,
    synthetic_vocab, write_jsonl, SftRecord, Split, Stage, SynthConfig,
};
use spangate::grammar::Schema;
use spangate::Vocab;

use crate::{load_schema, write_text};

pub const SCHEMA_FILE: &str = "schema.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const STATS_FILE: &str = "stats.txt";

/// `<stage>.<split>.jsonl`
pub fn split_file(stage: Stage, split: Split) -> String {
    format!("{}.{}.jsonl", stage.name(), split.name())
}

const TRAIN_FRAC: f64 = 0.8;
const DEV_FRAC: f64 = 0.1;

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Schema JSON: {"task": "NER"|"RE"|"EE", "labels": [...], "roles": {...}}
    #[arg(long, value_name = "PATH")]
    schema: PathBuf,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// SFT records to generate; the RL prompt set has the same size
    #[arg(long, default_value_t = 500)]
    records: usize,
    /// Label imbalance in [0, 1)
    #[arg(long, default_value_t = 0.0)]
    skew: f64,
}

#[derive(Args, Debug)]
pub struct BuildArgs {
    /// Schema JSON the records follow
    #[arg(long, value_name = "PATH")]
    schema: PathBuf,
    /// SFT records (JSONL)
    #[arg(long = "in", value_name = "PATH")]
    input: PathBuf,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn gen_synthetic(args: &GenArgs) -> Result<()> {
    let schema = load_schema(&args.schema)?;
    if !(0.0..1.0).contains(&args.skew) {
        return Err(crate::Usage(format!("--skew must lie in [0, 1), got {}", args.skew)).into());
    }
    let cfg = SynthConfig { skew: args.skew, ..SynthConfig::default() };
    let vocab = synthetic_vocab(&schema, &cfg)?;
    let sft = gen_synthetic_with(&schema, args.records, args.seed, &cfg);
    let rl = gen_synthetic_with(&schema, args.records, sub_seed(args.seed, 0x5151), &cfg);
    let name = format!("synthetic-{}", schema.task.to_string().to_lowercase());
    write_corpus(&args.out, &schema, &vocab, &name, &sft, &rl, args.seed)
}

pub fn build_data(args: &BuildArgs) -> Result<()> {
    let schema = load_schema(&args.schema)?;
    let records: Vec<SftRecord> =
        read_jsonl(&args.input).with_context(|| format!("cannot read records {}", args.input.display()))?;
    let vocab = corpus_vocab(&schema, &records)?;
    let name = args.input.file_stem().map_or("corpus".into(), |s| s.to_string_lossy().into_owned());
    write_corpus(&args.out, &schema, &vocab, &name, &records, &records, args.seed)
}

fn write_corpus(
    out: &Path,
    schema: &Schema,
    vocab: &Vocab,
    dataset: &str,
    sft: &[SftRecord],
    rl: &[SftRecord],
    seed: u64,
) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    write_text(&out.join(SCHEMA_FILE), &(schema.to_json() + "\n"))?;
    vocab.save(&out.join(VOCAB_FILE))?;
    let sft_splits = split_records(sft, TRAIN_FRAC, DEV_FRAC, seed);
    let rl_splits = split_records(rl, TRAIN_FRAC, DEV_FRAC, sub_seed(seed, 1));
    let mut entries = Vec::new();
    for split in Split::ALL {
        let s = &sft_splits[&split];
        let r = &rl_splits[&split];
        let rm = build_rm_records(schema, s, sub_seed(seed, 2 + split as u64))?;
        write_jsonl(s, &out.join(split_file(Stage::Sft, split)))?;
        write_jsonl(&rm, &out.join(split_file(Stage::Rm, split)))?;
        write_jsonl(r, &out.join(split_file(Stage::Rl, split)))?;
        entries.extend([(split, dataset, Stage::Sft, s.len()), (split, dataset, Stage::Rm, rm.len()), (split, dataset, Stage::Rl, r.len())]);
    }
    let table = corpus_stats(entries).render_table();
    write_text(&out.join(STATS_FILE), &table)?;
    print!("{table}");
    Ok(())
}
