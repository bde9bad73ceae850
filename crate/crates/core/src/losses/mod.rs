//! Training objectives, their analytic gradients, and a toy model to train.
//!
//! * [`sft_loss`]: token-mean cross-entropy of a target under per-step logits.
//! * [`reward_from_eos`]: scalar reward read off the EOS logit.
//! * [`rm_loss`]: pairwise ranking loss `softplus(-(r_pos - r_neg))`.
//! * [`rl_objective`]: reward minus `beta` times the sequence log-ratio.

pub mod lm;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::vocab::TokenId;

pub use lm::{LmConfig, TinySoftmaxLM};
pub use train::{
    exact_match_rate, pairwise_accuracy, probe_objective, reward, sft_example_grad, train_rl, train_rm, train_sft,
    sampled_validity_rate, train_sft_with, validity_rate, EpochReport, Example, LogRow, RlContext, RlOutput, RmExample,
    TrainConfig, TrainError, TrainOutput,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty target sequence")]
    Empty,
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("token id {id} out of range for {size} logits")]
    TokenOutOfRange { id: u32, size: usize },
    #[error("log-probability {0} is positive")]
    PositiveLogProb(f64),
    #[error("beta must be nonnegative, got {0}")]
    NegativeBeta(f64),
}

/// Per-step logits aligned with a target sequence.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogitSequence(pub Vec<Vec<f64>>);

impl LogitSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<Vec<f64>>> for LogitSequence {
    fn from(v: Vec<Vec<f64>>) -> Self {
        Self(v)
    }
}

fn finite(x: f64) -> Result<f64, LossError> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(LossError::NonFinite(x))
    }
}

/// Mean cross-entropy and its gradient with respect to every logit.
pub fn sft_loss(
    logits: &LogitSequence,
    target: &[TokenId],
) -> Result<(f64, Vec<Vec<f64>>), LossError> {
    if logits.len() != target.len() {
        return Err(LossError::LengthMismatch { left: logits.len(), right: target.len() });
    }
    if target.is_empty() {
        return Err(LossError::Empty);
    }
    let l = target.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(target.len());
    for (row, &t) in logits.0.iter().zip(target) {
        if t.index() >= row.len() {
            return Err(LossError::TokenOutOfRange { id: t.0, size: row.len() });
        }
        for &x in row {
            finite(x)?;
        }
        total -= lm::log_softmax_at(row, t.index());
        let mut g = lm::softmax(row);
        g[t.index()] -= 1.0;
        g.iter_mut().for_each(|x| *x /= l);
        grad.push(g);
    }
    Ok((total / l, grad))
}

/// The EOS coordinate of the final-step logits.
pub fn reward_from_eos(final_step_logits: &[f64], eos: TokenId) -> Result<f64, LossError> {
    final_step_logits
        .get(eos.index())
        .copied()
        .ok_or(LossError::TokenOutOfRange { id: eos.0, size: final_step_logits.len() })
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmLoss {
    pub loss: f64,
    pub d_pos: f64,
    pub d_neg: f64,
}

/// Pairwise ranking loss with gradients for both rewards.
pub fn rm_loss(r_pos: f64, r_neg: f64) -> Result<RmLoss, LossError> {
    let d = finite(r_pos)? - finite(r_neg)?;
    let s = sigmoid(-d);
    Ok(RmLoss { loss: softplus(-d), d_pos: -s, d_neg: s })
}

/// Per-token log-probabilities of one sampled response under the active
/// policy and the frozen reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyPair {
    active: Vec<f64>,
    reference: Vec<f64>,
}

impl PolicyPair {
    pub fn new(active: Vec<f64>, reference: Vec<f64>) -> Result<Self, LossError> {
        if active.len() != reference.len() {
            return Err(LossError::LengthMismatch { left: active.len(), right: reference.len() });
        }
        for &x in active.iter().chain(&reference) {
            if finite(x)? > 0.0 {
                return Err(LossError::PositiveLogProb(x));
            }
        }
        Ok(Self { active, reference })
    }

    pub fn active(&self) -> &[f64] {
        &self.active
    }

    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    /// Sequence log-ratio: the sum of per-token log-ratios.
    pub fn log_ratio(&self) -> f64 {
        self.active.iter().zip(&self.reference).map(|(a, r)| a - r).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub beta: f64,
    pub clip_ratio: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Prompts per rollout batch.
    pub batch_size: usize,
    /// Samples per prompt; their mean objective is the baseline.
    pub group_size: usize,
    /// Sampled responses per prompt when probing.
    pub probe_samples: usize,
    /// Optimisation passes over each rollout batch.
    pub inner_steps: usize,
    /// Cap on sampled response length.
    pub max_len: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            clip_ratio: 0.2,
            learning_rate: 3e-4,
            epochs: 5,
            batch_size: 8,
            group_size: 4,
            probe_samples: 4,
            inner_steps: 2,
            max_len: 48,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.beta >= 0.0) {
            return Err(LossError::NegativeBeta(self.beta));
        }
        Ok(())
    }
}

/// `reward - beta * log_ratio` for one sample.
pub fn rl_objective(reward: f64, pair: &PolicyPair, cfg: &RlConfig) -> Result<f64, LossError> {
    cfg.validate()?;
    Ok(finite(reward)? - cfg.beta * pair.log_ratio())
}

/// Gradient of [`rl_objective`] with respect to `(reward, beta, active, reference)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RlGrad {
    pub d_reward: f64,
    pub d_beta: f64,
    pub d_active: Vec<f64>,
    pub d_reference: Vec<f64>,
}

pub fn rl_objective_grad(pair: &PolicyPair, cfg: &RlConfig) -> RlGrad {
    let n = pair.active.len();
    RlGrad {
        d_reward: 1.0,
        d_beta: -pair.log_ratio(),
        d_active: vec![-cfg.beta; n],
        d_reference: vec![cfg.beta; n],
    }
}

/// Floor on the relative-error denominator so exact zeros compare absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Largest relative disagreement between the analytic gradient returned by
/// `f` and central finite differences with the given step.
pub fn gradient_check<F>(f: F, point: &[f64], step: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(point);
    assert_eq!(analytic.len(), point.len(), "gradient length must match the point");
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        x[i] = point[i] + step;
        let up = f(&x).0;
        x[i] = point[i] - step;
        let down = f(&x).0;
        x[i] = point[i];
        let numeric = (up - down) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}
