//! The three-stage toy run (SFT, reward model, RL) with its default sizes.
//! Both the CLI and the acceptance checks drive training through here.

use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};

use crate::data_forge::{encode_pair, encode_record, hard_negatives, sub_seed, DataError, RmRecord, SftRecord};
use crate::decode::LogitSource;
use crate::grammar::Schema;
use crate::losses::{
    exact_match_rate, train_rl, train_rm, train_sft_with, Example, LmConfig, LogRow, RlConfig, RlContext, RlOutput,
    RmExample, TinySoftmaxLM, TrainConfig, TrainError, TrainOutput,
};
use crate::vocab::Vocab;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub sft: TrainConfig,
    /// SFT stops early once training exact-match reaches this.
    pub target_exact_match: f64,
    /// Exact-match is measured every this many SFT epochs.
    pub eval_every: usize,
    /// SFT epochs whose weights are kept to sample hard negatives from.
    pub snapshot_epochs: Vec<usize>,
    pub negative_temperatures: Vec<f64>,
    /// Sampling passes per generator and temperature.
    pub negative_draws: usize,
    pub rm: TrainConfig,
    pub rl: RlConfig,
    pub seed: u64,
}

impl ToyConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            embed_dim: 24,
            hidden_dim: 96,
            sft: TrainConfig::sft(seed),
            target_exact_match: 0.95,
            eval_every: 5,
            snapshot_epochs: vec![5, 15],
            negative_temperatures: vec![1.0, 1.5],
            negative_draws: 2,
            rm: TrainConfig::rm(seed),
            rl: RlConfig { seed, ..RlConfig::default() },
            seed,
        }
    }

    pub fn lm_config(&self, vocab: &Vocab) -> LmConfig {
        LmConfig {
            vocab_size: vocab.len(),
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            bos: vocab.bos().0,
            eos: vocab.eos().0,
        }
    }
}

pub fn encode_all(vocab: &Vocab, records: &[SftRecord]) -> Result<Vec<Example>, DataError> {
    records.iter().map(|r| encode_record(vocab, r)).collect()
}

pub fn encode_pairs(vocab: &Vocab, records: &[RmRecord]) -> Result<Vec<RmExample>, DataError> {
    records.iter().map(|r| encode_pair(vocab, r)).collect()
}

#[derive(Debug, Clone)]
pub struct SftStage {
    pub model: TinySoftmaxLM,
    /// Weights at `snapshot_epochs`, in order, for those epochs reached.
    pub snapshots: Vec<TinySoftmaxLM>,
    /// One row per epoch; evaluated epochs carry `exact_match`.
    pub log: Vec<LogRow>,
    /// Exact-match of the returned model on the training records.
    pub exact_match: f64,
}

/// Trains from a fresh initialisation until the exact-match target or the
/// epoch budget is reached.
pub fn run_sft(vocab: &Vocab, schema: &Schema, records: &[SftRecord], cfg: &ToyConfig) -> Result<SftStage, PipelineError> {
    let examples = encode_all(vocab, records)?;
    let init = TinySoftmaxLM::new(cfg.lm_config(vocab), cfg.seed);
    let mut snapshots = Vec::new();
    let mut measured = Vec::new();
    let mut failure = None;
    let every = cfg.eval_every.max(1);
    let out = train_sft_with(init, &examples, &cfg.sft, |report, model| {
        if cfg.snapshot_epochs.contains(&report.epoch) {
            snapshots.push(model.clone());
        }
        if report.epoch % every == 0 {
            match exact_match_rate(model, vocab, schema, &examples) {
                Ok(em) => {
                    measured.push((report.epoch, em));
                    if em >= cfg.target_exact_match {
                        return ControlFlow::Break(());
                    }
                }
                Err(e) => {
                    failure = Some(e);
                    return ControlFlow::Break(());
                }
            }
        }
        ControlFlow::Continue(())
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    let TrainOutput { model, mut log } = out;
    let last_epoch = log.len();
    let exact_match = match measured.last() {
        Some(&(epoch, em)) if epoch == last_epoch => em,
        _ => {
            let em = exact_match_rate(&model, vocab, schema, &examples)?;
            measured.push((last_epoch, em));
            em
        }
    };
    for (epoch, em) in measured {
        if let Some(row) = log.get_mut(epoch.wrapping_sub(1)) {
            row.extra.insert("exact_match".into(), em);
        }
    }
    Ok(SftStage { model, snapshots, log, exact_match })
}

/// Confusion pairs plus hard negatives sampled without constraints from each
/// generator checkpoint.
pub fn rm_training_pairs(
    vocab: &Vocab,
    schema: &Schema,
    records: &[SftRecord],
    confusion: &[RmRecord],
    generators: &[&TinySoftmaxLM],
    cfg: &ToyConfig,
) -> Result<Vec<RmRecord>, DataError> {
    let sources: Vec<&dyn LogitSource> = generators.iter().map(|m| *m as &dyn LogitSource).collect();
    let mut pairs = confusion.to_vec();
    pairs.extend(hard_negatives(
        &sources,
        vocab,
        schema,
        records,
        &cfg.negative_temperatures,
        cfg.negative_draws,
        sub_seed(cfg.seed, 0x4e47),
    )?);
    Ok(pairs)
}

/// Reward model initialised from the SFT weights.
pub fn run_rm(sft: &TinySoftmaxLM, vocab: &Vocab, pairs: &[RmRecord], cfg: &ToyConfig) -> Result<TrainOutput, PipelineError> {
    let encoded = encode_pairs(vocab, pairs)?;
    Ok(train_rm(sft.clone(), &encoded, &cfg.rm)?)
}

/// KL-anchored RL starting from (and anchored to) the SFT model.
pub fn run_rl(
    sft: &TinySoftmaxLM,
    reward_model: &TinySoftmaxLM,
    vocab: &Vocab,
    schema: &Schema,
    prompts: &[SftRecord],
    probe: &[SftRecord],
    cfg: &ToyConfig,
) -> Result<RlOutput, PipelineError> {
    let corpus = encode_all(vocab, prompts)?;
    let probe = encode_all(vocab, probe)?;
    let env = RlContext { vocab, schema, reference: sft, reward_model };
    Ok(train_rl(sft.clone(), &env, &corpus, &probe, &cfg.rl)?)
}
