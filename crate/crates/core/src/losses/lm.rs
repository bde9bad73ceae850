//! A tiny autoregressive scorer with hand-written gradients.
//!
//! For the next position it concatenates four embedding features (previous
//! token, the token before that, the prompt embeddings summed and scaled by
//! 1/sqrt(n), the same pooling over the generated prefix) and three state
//! indicators, applies one tanh hidden layer and projects to the vocabulary:
//!
//! ```text
//! x = [E[p1]; E[p2]; pool E[prompt]; pool E[prefix]; c1; c2; q]  (4D + 3)
//! h = tanh(W1 x + b1)                                          (H)
//! logits = W2 h + b2                                           (V)
//! ```
//!
//! `c1` is 1 when `p1` occurs in the prompt. `c2` counts prefix tokens that
//! are neither structural nor special and do not occur in the prompt, scaled
//! by 1/sqrt(len). `q` is 1 while the prefix holds an odd number of quote
//! tokens. All three are constants with respect to the parameters.
//!
//! All parameters live in one flat vector so optimisers, checkpoints and
//! finite-difference checks can treat the model uniformly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decode::LogitSource;
use crate::rng::{stream, Stream};
use crate::vocab::{TokenId, STRUCTURAL_CHARS};

const STATE_FEATURES: usize = 3;
const QUOTE: usize = 4;
const _: () = assert!(STRUCTURAL_CHARS[QUOTE] == '"');

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Token used for missing history positions.
    pub bos: u32,
    /// Token whose logit doubles as the reward.
    pub eos: u32,
}

impl LmConfig {
    fn input_dim(&self) -> usize {
        4 * self.embed_dim + STATE_FEATURES
    }

    pub fn param_count(&self) -> usize {
        let (v, d, h) = (self.vocab_size, self.embed_dim, self.hidden_dim);
        v * d + h * self.input_dim() + h + v * h + v
    }
}

/// Offsets of the parameter blocks in the flat vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    embed: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl Layout {
    fn of(c: &LmConfig) -> Self {
        let embed = 0;
        let w1 = embed + c.vocab_size * c.embed_dim;
        let b1 = w1 + c.hidden_dim * c.input_dim();
        let w2 = b1 + c.hidden_dim;
        let b2 = w2 + c.vocab_size * c.hidden_dim;
        Self { embed, w1, b1, w2, b2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinySoftmaxLM {
    pub config: LmConfig,
    pub params: Vec<f64>,
}

/// Per-prompt quantities shared by every position of a sequence.
#[derive(Debug, Clone)]
pub struct PromptFeatures {
    pooled: Vec<f64>,
    present: Vec<bool>,
}

/// Forward activations for one position.
#[derive(Debug, Clone)]
pub struct StepCache {
    p1: TokenId,
    p2: TokenId,
    x: Vec<f64>,
    h: Vec<f64>,
    pub logits: Vec<f64>,
}

impl TinySoftmaxLM {
    /// Random initialisation from the `Init` stream of `seed`.
    pub fn new(config: LmConfig, seed: u64) -> Self {
        let mut rng = stream(seed, Stream::Init);
        let lay = Layout::of(&config);
        let mut params = vec![0.0; config.param_count()];
        let e_scale = 0.5;
        let w1_scale = 1.0 / (config.input_dim() as f64).sqrt();
        let w2_scale = 1.0 / (config.hidden_dim as f64).sqrt();
        for p in &mut params[lay.embed..lay.w1] {
            *p = rng.gen_range(-e_scale..e_scale);
        }
        for p in &mut params[lay.w1..lay.b1] {
            *p = rng.gen_range(-w1_scale..w1_scale);
        }
        for p in &mut params[lay.w2..lay.b2] {
            *p = rng.gen_range(-w2_scale..w2_scale);
        }
        Self { config, params }
    }

    pub fn with_params(config: LmConfig, params: Vec<f64>) -> Self {
        assert_eq!(params.len(), config.param_count(), "parameter count mismatch");
        Self { config, params }
    }

    fn layout(&self) -> Layout {
        Layout::of(&self.config)
    }

    fn embedding(&self, t: TokenId) -> &[f64] {
        let d = self.config.embed_dim;
        let base = self.layout().embed + t.index() * d;
        &self.params[base..base + d]
    }

    fn pool(&self, tokens: &[TokenId]) -> Vec<f64> {
        let mut m = vec![0.0; self.config.embed_dim];
        if tokens.is_empty() {
            return m;
        }
        for &t in tokens {
            for (a, e) in m.iter_mut().zip(self.embedding(t)) {
                *a += e;
            }
        }
        let n = (tokens.len() as f64).sqrt();
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    /// Pooled prompt embedding (zeros when empty) and token presence.
    pub fn prompt_feature(&self, prompt: &[TokenId]) -> PromptFeatures {
        let mut present = vec![false; self.config.vocab_size];
        for t in prompt {
            present[t.index()] = true;
        }
        PromptFeatures { pooled: self.pool(prompt), present }
    }

    fn is_content(&self, t: TokenId) -> bool {
        t.index() >= STRUCTURAL_CHARS.len() && t.0 != self.config.bos && t.0 != self.config.eos
    }

    /// Forward pass for the position after `prefix`.
    pub fn step(&self, pf: &PromptFeatures, prefix: &[TokenId]) -> StepCache {
        let c = &self.config;
        let (d, hd, v) = (c.embed_dim, c.hidden_dim, c.vocab_size);
        let width = c.input_dim();
        let bos = TokenId(c.bos);
        let p1 = prefix.last().copied().unwrap_or(bos);
        let p2 = if prefix.len() >= 2 { prefix[prefix.len() - 2] } else { bos };
        let mut x = Vec::with_capacity(width);
        x.extend_from_slice(self.embedding(p1));
        x.extend_from_slice(self.embedding(p2));
        x.extend_from_slice(&pf.pooled);
        x.extend_from_slice(&self.pool(prefix));
        let copied = !prefix.is_empty() && pf.present[p1.index()];
        x.push(if copied { 1.0 } else { 0.0 });
        let novel = prefix.iter().filter(|&&t| self.is_content(t) && !pf.present[t.index()]).count();
        x.push(if prefix.is_empty() { 0.0 } else { novel as f64 / (prefix.len() as f64).sqrt() });
        let quotes = prefix.iter().filter(|t| t.index() == QUOTE).count();
        x.push((quotes % 2) as f64);
        debug_assert_eq!(x.len(), d * 4 + STATE_FEATURES);

        let lay = self.layout();
        let w1 = &self.params[lay.w1..lay.b1];
        let b1 = &self.params[lay.b1..lay.w2];
        let h: Vec<f64> = (0..hd)
            .map(|j| {
                let row = &w1[j * width..(j + 1) * width];
                (b1[j] + row.iter().zip(&x).map(|(w, xi)| w * xi).sum::<f64>()).tanh()
            })
            .collect();
        let w2 = &self.params[lay.w2..lay.b2];
        let b2 = &self.params[lay.b2..];
        let logits = (0..v)
            .map(|k| {
                let row = &w2[k * hd..(k + 1) * hd];
                b2[k] + row.iter().zip(&h).map(|(w, hj)| w * hj).sum::<f64>()
            })
            .collect();
        StepCache { p1, p2, x, h, logits }
    }

    /// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(logits) at
    /// one position. Returns the gradient w.r.t. the pooled prompt feature so
    /// callers can spread it over the prompt once per sequence.
    pub fn backward_step(
        &self,
        prefix: &[TokenId],
        cache: &StepCache,
        dlogits: &[f64],
        grad: &mut [f64],
    ) -> Vec<f64> {
        let c = &self.config;
        let (d, hd, v) = (c.embed_dim, c.hidden_dim, c.vocab_size);
        let lay = self.layout();
        let mut dh = vec![0.0; hd];
        for k in 0..v {
            let g = dlogits[k];
            if g == 0.0 {
                continue;
            }
            grad[lay.b2 + k] += g;
            let row = lay.w2 + k * hd;
            for j in 0..hd {
                grad[row + j] += g * cache.h[j];
                dh[j] += g * self.params[row + j];
            }
        }
        let width = c.input_dim();
        let mut dx = vec![0.0; width];
        for j in 0..hd {
            let da = dh[j] * (1.0 - cache.h[j] * cache.h[j]);
            if da == 0.0 {
                continue;
            }
            grad[lay.b1 + j] += da;
            let row = lay.w1 + j * width;
            for i in 0..width {
                grad[row + i] += da * cache.x[i];
                dx[i] += da * self.params[row + i];
            }
        }
        let add_embed = |grad: &mut [f64], t: TokenId, g: &[f64], scale: f64| {
            let base = lay.embed + t.index() * d;
            for i in 0..d {
                grad[base + i] += scale * g[i];
            }
        };
        add_embed(grad, cache.p1, &dx[0..d], 1.0);
        add_embed(grad, cache.p2, &dx[d..2 * d], 1.0);
        if !prefix.is_empty() {
            let s = 1.0 / (prefix.len() as f64).sqrt();
            for &t in prefix {
                add_embed(grad, t, &dx[3 * d..4 * d], s);
            }
        }
        dx[2 * d..3 * d].to_vec()
    }

    /// Spreads a pooled-prompt gradient over the prompt's embeddings.
    pub fn backward_prompt(&self, prompt: &[TokenId], dmean: &[f64], grad: &mut [f64]) {
        if prompt.is_empty() {
            return;
        }
        let d = self.config.embed_dim;
        let base0 = self.layout().embed;
        let s = 1.0 / (prompt.len() as f64).sqrt();
        for &t in prompt {
            let base = base0 + t.index() * d;
            for i in 0..d {
                grad[base + i] += s * dmean[i];
            }
        }
    }

    /// Teacher-forced logits for every position of `target`.
    pub fn sequence_logits(&self, prompt: &[TokenId], target: &[TokenId]) -> Vec<Vec<f64>> {
        let pf = self.prompt_feature(prompt);
        (0..target.len()).map(|i| self.step(&pf, &target[..i]).logits).collect()
    }

    /// Per-token log-probabilities of `target` under teacher forcing.
    pub fn token_logprobs(&self, prompt: &[TokenId], target: &[TokenId]) -> Vec<f64> {
        self.sequence_logits(prompt, target)
            .iter()
            .zip(target)
            .map(|(l, t)| log_softmax_at(l, t.index()))
            .collect()
    }

    /// Runs teacher forcing and backpropagates `dlogits_fn(position, logits)`.
    pub fn accumulate_sequence_grad(
        &self,
        prompt: &[TokenId],
        target: &[TokenId],
        mut dlogits_fn: impl FnMut(usize, &[f64]) -> Vec<f64>,
        grad: &mut [f64],
    ) {
        let pf = self.prompt_feature(prompt);
        let mut dprompt = vec![0.0; self.config.embed_dim];
        for i in 0..target.len() {
            let prefix = &target[..i];
            let cache = self.step(&pf, prefix);
            let dl = dlogits_fn(i, &cache.logits);
            let dp = self.backward_step(prefix, &cache, &dl, grad);
            dprompt.iter_mut().zip(&dp).for_each(|(a, b)| *a += b);
        }
        self.backward_prompt(prompt, &dprompt, grad);
    }

    /// Stable fingerprint of the parameters.
    pub fn checksum(&self) -> u64 {
        self.params
            .iter()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, p| (h ^ p.to_bits()).wrapping_mul(0x0100_0000_01b3))
    }
}

pub fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits[k] - lse
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

impl LogitSource for TinySoftmaxLM {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn logits(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Vec<f64> {
        self.step(&self.prompt_feature(prompt), prefix).logits
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TinySoftmaxLM {
        TinySoftmaxLM::new(LmConfig { vocab_size: 9, embed_dim: 3, hidden_dim: 5, bos: 7, eos: 8 }, 11)
    }

    fn ids(v: &[u32]) -> Vec<TokenId> {
        v.iter().map(|&i| TokenId(i)).collect()
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(tiny(), tiny());
        let other = TinySoftmaxLM::new(tiny().config, 12);
        assert_ne!(tiny().params, other.params);
        assert_eq!(tiny().params.len(), tiny().config.param_count());
    }

    #[test]
    fn logit_source_matches_teacher_forcing() {
        let m = tiny();
        let prompt = ids(&[1, 2, 3]);
        let target = ids(&[4, 5, 6]);
        let seq = m.sequence_logits(&prompt, &target);
        for i in 0..target.len() {
            assert_eq!(seq[i], m.logits(&prompt, &target[..i]));
        }
    }

    #[test]
    fn state_indicators_track_prompt_and_quotes() {
        let m = TinySoftmaxLM::new(LmConfig { vocab_size: 12, embed_dim: 3, hidden_dim: 5, bos: 7, eos: 8 }, 11);
        let pf = m.prompt_feature(&ids(&[9, 0]));
        let at = |prefix: &[u32]| {
            let x = m.step(&pf, &ids(prefix)).x;
            (x[12], x[13], x[14])
        };
        assert_eq!(at(&[]), (0.0, 0.0, 0.0));
        assert_eq!(at(&[0, 9]), (1.0, 0.0, 0.0));
        // 10 is content missing from the prompt, 1 is structural, 8 is eos
        assert_eq!(at(&[10, 1, 9, 9]), (1.0, 0.5, 0.0));
        assert_eq!(at(&[10, 1, 10, 8]), (0.0, 1.0, 0.0));
        // 4 is the quote token
        assert_eq!(at(&[4, 9]), (1.0, 0.0, 1.0));
        assert_eq!(at(&[4, 9, 4]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn log_softmax_normalises() {
        let l = [0.3, -2.0, 1.5];
        let total: f64 = (0..3).map(|k| log_softmax_at(&l, k).exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((softmax(&l).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sequence_gradient_matches_finite_differences() {
        let m = TinySoftmaxLM::new(LmConfig { vocab_size: 12, embed_dim: 3, hidden_dim: 5, bos: 7, eos: 8 }, 11);
        let prompt = ids(&[1, 9, 3, 2]);
        let target = ids(&[4, 9, 10, 11, 8]);
        let f = |p: &[f64]| {
            let lm = TinySoftmaxLM::with_params(m.config, p.to_vec());
            let logits = super::super::LogitSequence(lm.sequence_logits(&prompt, &target));
            let (loss, dl) = super::super::sft_loss(&logits, &target).unwrap();
            let mut g = vec![0.0; p.len()];
            lm.accumulate_sequence_grad(&prompt, &target, |i, _| dl[i].clone(), &mut g);
            (loss, g)
        };
        let err = super::super::gradient_check(f, &m.params, 1e-5);
        assert!(err < 1e-6, "max relative error {err}");
    }
}
