//! Per-record gradient descent for the three training stages.

use std::collections::BTreeMap;
use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lm::{log_softmax_at, softmax, TinySoftmaxLM};
use super::{reward_from_eos, rm_loss, sft_loss, LogitSequence, LossError, PolicyPair, RlConfig};
use crate::decode::{decode, DecodeConfig, DecodeError, Strategy};
use crate::extraction::Extraction;
use crate::grammar::Schema;
use crate::metrics::PredictionSet;
use crate::rng::{mix64, stream, Stream};
use crate::validate::Validator;
use crate::vocab::{TokenId, TokenSequence, Vocab};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("reference model was modified during training")]
    ReferenceMutated,
    #[error("empty training set")]
    EmptyCorpus,
}

/// One supervised example, already tokenised.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// Instruction followed by context.
    pub prompt: TokenSequence,
    pub context: TokenSequence,
    /// Gold output tokens, ending with EOS.
    pub target: TokenSequence,
    /// Gold output text.
    pub output: String,
}

impl Example {
    /// The target without its trailing EOS.
    pub fn response(&self) -> &[TokenId] {
        &self.target[..self.target.len().saturating_sub(1)]
    }
}

/// A ranking pair sharing one prompt. Responses carry no EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct RmExample {
    pub prompt: TokenSequence,
    pub positive: TokenSequence,
    pub negative: TokenSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Per-record gradients are rescaled to at most this L2 norm.
    pub clip_norm: f64,
    pub seed: u64,
    /// Fraction of the initial rate left at the last epoch (linear decay);
    /// 1.0 keeps the rate constant.
    pub final_lr_fraction: f64,
    pub optimizer: OptimizerKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Per-parameter optimiser state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    clip_norm: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, n_params: usize, clip_norm: f64) -> Self {
        let n = if kind == OptimizerKind::Adam { n_params } else { 0 };
        Self { kind, clip_norm, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Clips `grad` to `clip_norm`, takes one step and zeroes `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &mut [f64], lr: f64) {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad.iter_mut()) {
                    *p -= lr * scale * *g;
                    *g = 0.0;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - Self::B1.powi(self.t);
                let c2 = 1.0 - Self::B2.powi(self.t);
                for i in 0..params.len() {
                    let g = grad[i] * scale;
                    self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
                    self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
                    params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
                    grad[i] = 0.0;
                }
            }
        }
    }
}

impl TrainConfig {
    /// Adam, sized for the toy model.
    pub fn sft(seed: u64) -> Self {
        Self { learning_rate: 3e-3, epochs: 40, clip_norm: 5.0, seed, final_lr_fraction: 0.1, optimizer: OptimizerKind::Adam }
    }

    /// Adam at a fifth of the SFT rate.
    pub fn rm(seed: u64) -> Self {
        Self { learning_rate: 6e-4, epochs: 20, clip_norm: 5.0, seed, final_lr_fraction: 0.1, optimizer: OptimizerKind::Adam }
    }
}

/// One JSONL log row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    #[serde(flatten)]
    pub extra: BTreeMap<String, f64>,
}

impl LogRow {
    fn new(step: usize, loss: f64) -> Self {
        Self { step, loss, extra: BTreeMap::new() }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.extra.insert(key.to_string(), value);
        self
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: TinySoftmaxLM,
    pub log: Vec<LogRow>,
}

impl TrainConfig {
    fn rate_at(&self, epoch: usize) -> f64 {
        let t = if self.epochs > 1 { epoch as f64 / (self.epochs - 1) as f64 } else { 0.0 };
        self.learning_rate * (1.0 - (1.0 - self.final_lr_fraction) * t)
    }
}

/// Supervised loss and parameter gradient for one example.
pub fn sft_example_grad(model: &TinySoftmaxLM, ex: &Example, grad: &mut [f64]) -> Result<f64, LossError> {
    let logits = LogitSequence(model.sequence_logits(&ex.prompt, &ex.target));
    let (loss, dlogits) = sft_loss(&logits, &ex.target)?;
    model.accumulate_sequence_grad(&ex.prompt, &ex.target, |i, _| dlogits[i].clone(), grad);
    Ok(loss)
}

/// Epoch summary handed to the monitor of [`train_sft_with`].
#[derive(Debug, Clone, Copy)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
}

pub fn train_sft(model: TinySoftmaxLM, examples: &[Example], cfg: &TrainConfig) -> Result<TrainOutput, TrainError> {
    train_sft_with(model, examples, cfg, |_, _| ControlFlow::Continue(()))
}

/// SFT with a per-epoch monitor that may stop training early.
pub fn train_sft_with(
    mut model: TinySoftmaxLM,
    examples: &[Example],
    cfg: &TrainConfig,
    mut monitor: impl FnMut(&EpochReport, &TinySoftmaxLM) -> ControlFlow<()>,
) -> Result<TrainOutput, TrainError> {
    let mut log = Vec::new();
    if cfg.epochs == 0 {
        return Ok(TrainOutput { model, log });
    }
    if examples.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut rng = stream(cfg.seed, Stream::Data);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut grad = vec![0.0; model.params.len()];
    let mut opt = Optimizer::new(cfg.optimizer, grad.len(), cfg.clip_norm);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.rate_at(epoch);
        let mut total = 0.0;
        for &i in &order {
            total += sft_example_grad(&model, &examples[i], &mut grad)?;
            opt.step(&mut model.params, &mut grad, lr);
            step += 1;
        }
        let report = EpochReport { epoch: epoch + 1, mean_loss: total / examples.len() as f64 };
        log.push(LogRow::new(step, report.mean_loss).with("epoch", report.epoch as f64));
        if monitor(&report, &model).is_break() {
            break;
        }
    }
    Ok(TrainOutput { model, log })
}

/// Fraction of examples whose constrained greedy decode parses to the same
/// multiset of predictions as the gold output.
pub fn exact_match_rate(
    model: &TinySoftmaxLM,
    vocab: &Vocab,
    schema: &Schema,
    examples: &[Example],
) -> Result<f64, TrainError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let cfg = DecodeConfig { max_len: 64, ..DecodeConfig::default() };
    let mut hits = 0;
    for ex in examples {
        let out = match decode(model, vocab, schema, &ex.prompt, &ex.context, &cfg) {
            Ok(o) => o,
            Err(DecodeError::Truncated { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        let text = vocab.decode(&out.tokens).unwrap_or_default();
        if let (Ok(pred), Ok(gold)) = (Extraction::parse(&text, schema), Extraction::parse(&ex.output, schema)) {
            if PredictionSet::from_extraction(&pred).same_multiset(&PredictionSet::from_extraction(&gold)) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Reward of a response: the EOS logit right after it.
pub fn reward(model: &TinySoftmaxLM, prompt: &[TokenId], response: &[TokenId]) -> f64 {
    let logits = model.step(&model.prompt_feature(prompt), response).logits;
    reward_from_eos(&logits, TokenId(model.config.eos)).expect("eos id is inside the vocabulary")
}

fn reward_grad(model: &TinySoftmaxLM, prompt: &[TokenId], response: &[TokenId], scale: f64, grad: &mut [f64]) {
    let cache = model.step(&model.prompt_feature(prompt), response);
    let mut dlogits = vec![0.0; model.config.vocab_size];
    dlogits[model.config.eos as usize] = scale;
    let dprompt = model.backward_step(response, &cache, &dlogits, grad);
    model.backward_prompt(prompt, &dprompt, grad);
}

/// Fraction of pairs ranked correctly (`r_pos > r_neg`).
pub fn pairwise_accuracy(model: &TinySoftmaxLM, pairs: &[RmExample]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let ok = pairs
        .iter()
        .filter(|p| reward(model, &p.prompt, &p.positive) > reward(model, &p.prompt, &p.negative))
        .count();
    ok as f64 / pairs.len() as f64
}

/// Trains the EOS-logit reward on ranking pairs. Logs mean loss and
/// training pairwise accuracy per epoch.
pub fn train_rm(mut model: TinySoftmaxLM, pairs: &[RmExample], cfg: &TrainConfig) -> Result<TrainOutput, TrainError> {
    let mut log = Vec::new();
    if cfg.epochs == 0 {
        return Ok(TrainOutput { model, log });
    }
    if pairs.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut rng = stream(cfg.seed, Stream::Data);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut grad = vec![0.0; model.params.len()];
    let mut opt = Optimizer::new(cfg.optimizer, grad.len(), cfg.clip_norm);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.rate_at(epoch);
        let mut total = 0.0;
        for &i in &order {
            let p = &pairs[i];
            let l = rm_loss(reward(&model, &p.prompt, &p.positive), reward(&model, &p.prompt, &p.negative))?;
            total += l.loss;
            reward_grad(&model, &p.prompt, &p.positive, l.d_pos, &mut grad);
            reward_grad(&model, &p.prompt, &p.negative, l.d_neg, &mut grad);
            opt.step(&mut model.params, &mut grad, lr);
            step += 1;
        }
        log.push(
            LogRow::new(step, total / pairs.len() as f64)
                .with("epoch", (epoch + 1) as f64)
                .with("pairwise_accuracy", pairwise_accuracy(&model, pairs)),
        );
    }
    Ok(TrainOutput { model, log })
}

#[derive(Debug, Clone)]
pub struct RlOutput {
    pub model: TinySoftmaxLM,
    /// One row per epoch; row 0 is the probe before any update.
    pub log: Vec<LogRow>,
}

/// Everything the RL stage reads but never changes.
#[derive(Clone, Copy)]
pub struct RlContext<'a> {
    pub vocab: &'a Vocab,
    pub schema: &'a Schema,
    pub reference: &'a TinySoftmaxLM,
    pub reward_model: &'a TinySoftmaxLM,
}

struct Rollout {
    prompt: TokenSequence,
    /// Sampled tokens, EOS included when emitted.
    tokens: Vec<TokenId>,
    old_logp: Vec<f64>,
    advantage: f64,
}

/// Mean objective `reward - beta * log_ratio` and mean reward over
/// `cfg.probe_samples` sampled unconstrained responses per probe prompt.
/// Sample seeds depend only on `cfg.seed` and the prompt index, so repeated
/// probes compare policies on common random numbers.
pub fn probe_objective(
    active: &TinySoftmaxLM,
    env: &RlContext<'_>,
    probe: &[Example],
    cfg: &RlConfig,
) -> Result<(f64, f64), TrainError> {
    let k = cfg.probe_samples.max(1);
    if probe.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut obj, mut rew) = (0.0, 0.0);
    for (i, ex) in probe.iter().enumerate() {
        for j in 0..k {
            let seed = mix64(cfg.seed ^ mix64((i * k + j) as u64 + 1));
            let dcfg = DecodeConfig {
                strategy: Strategy::Sample { temperature: cfg.temperature, seed },
                max_len: cfg.max_len,
                constraints: false,
            };
            let (tokens, finished) = unconstrained(active, env.vocab, env.schema, ex, &dcfg)?;
            let r = reward(env.reward_model, &ex.prompt, &tokens);
            let mut full = tokens;
            if finished {
                full.push(env.vocab.eos());
            }
            let pair = PolicyPair::new(
                active.token_logprobs(&ex.prompt, &full),
                env.reference.token_logprobs(&ex.prompt, &full),
            )?;
            obj += super::rl_objective(r, &pair, cfg)?;
            rew += r;
        }
    }
    let n = (probe.len() * k) as f64;
    Ok((obj / n, rew / n))
}

/// Unconstrained decode; truncation is a normal outcome here.
fn unconstrained(
    model: &TinySoftmaxLM,
    vocab: &Vocab,
    schema: &Schema,
    ex: &Example,
    dcfg: &DecodeConfig,
) -> Result<(Vec<TokenId>, bool), TrainError> {
    match decode(model, vocab, schema, &ex.prompt, &ex.context, dcfg) {
        Ok(o) => Ok((o.tokens.into_inner(), true)),
        Err(DecodeError::Truncated { partial, .. }) => Ok((partial.into_inner(), false)),
        Err(e) => Err(e.into()),
    }
}

/// Clipped-ratio policy gradient on `reward - beta * log_ratio` with the
/// reference frozen. Samples come from the current policy without masking.
pub fn train_rl(
    mut active: TinySoftmaxLM,
    env: &RlContext<'_>,
    corpus: &[Example],
    probe: &[Example],
    cfg: &RlConfig,
) -> Result<RlOutput, TrainError> {
    cfg.validate()?;
    let ref_sum = env.reference.checksum();
    let mut log = Vec::new();
    let (obj, rew) = probe_objective(&active, env, probe, cfg)?;
    log.push(LogRow::new(0, -obj).with("objective", obj).with("reward", rew).with("epoch", 0.0));
    if cfg.epochs == 0 {
        return Ok(RlOutput { model: active, log });
    }
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut rng = stream(cfg.seed, Stream::Sampling);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut grad = vec![0.0; active.params.len()];
    let mut opt = Optimizer::new(OptimizerKind::Adam, grad.len(), 5.0);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut rollouts = Vec::with_capacity(batch.len() * cfg.group_size);
            for (&i, _) in batch.iter().flat_map(|i| std::iter::repeat(i).zip(0..cfg.group_size.max(1))) {
                let ex = &corpus[i];
                let dcfg = DecodeConfig {
                    strategy: Strategy::Sample { temperature: cfg.temperature, seed: mix64(rng.gen()) },
                    max_len: cfg.max_len,
                    constraints: false,
                };
                let (mut tokens, finished) = unconstrained(&active, env.vocab, env.schema, ex, &dcfg)?;
                let r = reward(env.reward_model, &ex.prompt, &tokens);
                if finished {
                    tokens.push(env.vocab.eos());
                }
                let old_logp = active.token_logprobs(&ex.prompt, &tokens);
                let pair = PolicyPair::new(old_logp.clone(), env.reference.token_logprobs(&ex.prompt, &tokens))?;
                let advantage = super::rl_objective(r, &pair, cfg)?;
                rollouts.push(Rollout { prompt: ex.prompt.clone(), tokens, old_logp, advantage });
            }
            center_and_scale(&mut rollouts, cfg.group_size.max(1));
            // one step per pass on the batch-mean surrogate
            let scale = 1.0 / rollouts.len() as f64;
            for _ in 0..cfg.inner_steps {
                for ro in &rollouts {
                    if ro.tokens.is_empty() {
                        continue;
                    }
                    let a = ro.advantage;
                    let eps = cfg.clip_ratio;
                    active.accumulate_sequence_grad(
                        &ro.prompt,
                        &ro.tokens,
                        |t, logits| {
                            let k = ro.tokens[t].index();
                            let ratio = (log_softmax_at(logits, k) - ro.old_logp[t]).exp();
                            let clipped = (a > 0.0 && ratio > 1.0 + eps) || (a < 0.0 && ratio < 1.0 - eps);
                            let mut g = vec![0.0; logits.len()];
                            if clipped {
                                return g;
                            }
                            // descent direction for -(ratio * a), summed over the sequence
                            let c = -ratio * a * scale;
                            for (gi, p) in g.iter_mut().zip(softmax(logits)) {
                                *gi = -c * p;
                            }
                            g[k] += c;
                            g
                        },
                        &mut grad,
                    );
                }
                opt.step(&mut active.params, &mut grad, cfg.learning_rate);
                step += 1;
            }
            if env.reference.checksum() != ref_sum {
                return Err(TrainError::ReferenceMutated);
            }
        }
        let (obj, rew) = probe_objective(&active, env, probe, cfg)?;
        log.push(LogRow::new(step, -obj).with("objective", obj).with("reward", rew).with("epoch", (epoch + 1) as f64));
    }
    Ok(RlOutput { model: active, log })
}

/// Subtracts each prompt group's mean objective, then divides by the batch
/// standard deviation of the centred values. Groups whose samples all score
/// the same contribute no update.
fn center_and_scale(rollouts: &mut [Rollout], group: usize) {
    for g in rollouts.chunks_mut(group) {
        let mean = g.iter().map(|r| r.advantage).sum::<f64>() / g.len() as f64;
        g.iter_mut().for_each(|r| r.advantage -= mean);
    }
    let n = rollouts.len() as f64;
    let sd = (rollouts.iter().map(|r| r.advantage * r.advantage).sum::<f64>() / n).sqrt();
    if sd > 1e-8 {
        rollouts.iter_mut().for_each(|r| r.advantage /= sd);
    }
}

/// Fraction of unconstrained greedy decodes that pass the validator.
pub fn validity_rate(model: &TinySoftmaxLM, vocab: &Vocab, schema: &Schema, examples: &[Example], max_len: usize) -> Result<f64, TrainError> {
    let dcfg = DecodeConfig { strategy: Strategy::Greedy, max_len, constraints: false };
    valid_fraction(model, vocab, schema, examples, 1, |_| dcfg.clone())
}

/// Validity over `samples` unconstrained draws per example. Draw `j` of
/// example `i` uses a seed fixed by `(seed, i, j)`, so two models compared
/// with the same arguments see the same random numbers.
pub fn sampled_validity_rate(
    model: &TinySoftmaxLM,
    vocab: &Vocab,
    schema: &Schema,
    examples: &[Example],
    max_len: usize,
    temperature: f64,
    samples: usize,
    seed: u64,
) -> Result<f64, TrainError> {
    let k = samples.max(1);
    valid_fraction(model, vocab, schema, examples, k, |n| DecodeConfig {
        strategy: Strategy::Sample { temperature, seed: mix64(seed ^ mix64(n as u64 + 1)) },
        max_len,
        constraints: false,
    })
}

fn valid_fraction(
    model: &TinySoftmaxLM,
    vocab: &Vocab,
    schema: &Schema,
    examples: &[Example],
    k: usize,
    config_for: impl Fn(usize) -> DecodeConfig,
) -> Result<f64, TrainError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut ok = 0;
    for (i, ex) in examples.iter().enumerate() {
        let validator = Validator::new(vocab, schema, &ex.context);
        for j in 0..k {
            let (tokens, finished) = unconstrained(model, vocab, schema, ex, &config_for(i * k + j))?;
            if finished && validator.check(&vocab.decode(&tokens).unwrap_or_default()).is_ok() {
                ok += 1;
            }
        }
    }
    Ok(ok as f64 / (examples.len() * k) as f64)
}
