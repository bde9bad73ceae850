//! Masked decoding loop.
//!
//! At every step the logit source scores the whole vocabulary, the grammar
//! supplies the legal next tokens, and the softmax is renormalised over that
//! set only. With the full-vocabulary mask this is the plain softmax.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grammar::{Grammar, GrammarError, Schema, TokenMask};
use crate::rng::mix64;
use crate::span_index::{SpanError, SpanTrie};
use crate::vocab::{TokenId, TokenSequence, Vocab};

/// Scores the next token given a prompt and the tokens generated so far.
///
/// Implementations must be pure: equal inputs give equal logits. That makes
/// a shared source safe to query from concurrent decodes.
pub trait LogitSource: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Logit vector of length `vocab_size()`.
    fn logits(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Vec<f64>;
}

impl<T: LogitSource + ?Sized> LogitSource for &T {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn logits(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Vec<f64> {
        (**self).logits(prompt, prefix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub max_len: usize,
    pub constraints: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { strategy: Strategy::Greedy, max_len: 256, constraints: true }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DistributionError {
    #[error("mask allows no token")]
    EmptyMask,
    #[error("logit {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("logit vector has length {got}, mask covers {expected}")]
    LengthMismatch { got: usize, expected: usize },
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DecodeError {
    #[error("reached max_len={max_len} before completing the output")]
    Truncated { max_len: usize, partial: TokenSequence },
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Context(#[from] SpanError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("logit source covers {got} tokens, vocabulary has {expected}")]
    VocabMismatch { got: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    /// Generated tokens, without a trailing EOS.
    pub tokens: TokenSequence,
    /// Sum of log-probabilities of the emitted tokens under the (masked)
    /// distributions actually sampled from.
    pub logprob: f64,
}

/// Softmax over the masked subset; zero outside it.
pub fn constrained_distribution(logits: &[f64], mask: &TokenMask) -> Result<Vec<f64>, DistributionError> {
    if logits.len() != mask.vocab_size() {
        return Err(DistributionError::LengthMismatch { got: logits.len(), expected: mask.vocab_size() });
    }
    if let Some((index, &value)) = logits.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(DistributionError::NonFinite { index, value });
    }
    let max = mask
        .iter()
        .map(|t| logits[t.index()])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(DistributionError::EmptyMask);
    }
    let mut probs = vec![0.0; logits.len()];
    let mut z = 0.0;
    for t in mask.iter() {
        let e = (logits[t.index()] - max).exp();
        probs[t.index()] = e;
        z += e;
    }
    for p in &mut probs {
        *p /= z;
    }
    Ok(probs)
}

/// Highest-probability allowed token; ties go to the lower id.
fn argmax(probs: &[f64], mask: &TokenMask) -> TokenId {
    let mut best = None::<(TokenId, f64)>;
    for t in mask.iter() {
        let p = probs[t.index()];
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((t, p));
        }
    }
    best.expect("mask is non-empty").0
}

fn sample(probs: &[f64], mask: &TokenMask, rng: &mut ChaCha8Rng) -> TokenId {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = None;
    for t in mask.iter() {
        acc += probs[t.index()];
        last = Some(t);
        if u < acc {
            return t;
        }
    }
    last.expect("mask is non-empty")
}

/// Builds the grammar for `context` and decodes against it.
pub fn decode(
    src: &dyn LogitSource,
    vocab: &Vocab,
    schema: &Schema,
    prompt: &[TokenId],
    context: &TokenSequence,
    cfg: &DecodeConfig,
) -> Result<DecodeOutput, DecodeError> {
    let grammar = Grammar::build(vocab, schema, SpanTrie::build(context.clone())?)?;
    decode_with(src, vocab, &grammar, prompt, cfg)
}

/// The decoding loop. With constraints on, decoding stops when the grammar
/// accepts; with constraints off, on EOS.
///
/// Constrained decoding is also budget-aware: once few tokens remain, tokens
/// after which Accept is out of reach within `max_len` are masked too, so a
/// constrained decode truncates only when `max_len` is shorter than the
/// shortest valid output.
pub fn decode_with(
    src: &dyn LogitSource,
    vocab: &Vocab,
    grammar: &Grammar,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<DecodeOutput, DecodeError> {
    if cfg.max_len == 0 {
        return Err(DecodeError::Config("max_len must be at least 1".into()));
    }
    let mut rng = match cfg.strategy {
        Strategy::Sample { temperature, seed } => {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(DecodeError::Config(format!("temperature must be > 0, got {temperature}")));
            }
            Some((ChaCha8Rng::seed_from_u64(seed), temperature))
        }
        Strategy::Greedy => None,
    };
    if src.vocab_size() != vocab.len() {
        return Err(DecodeError::VocabMismatch { got: src.vocab_size(), expected: vocab.len() });
    }
    let full = TokenMask::full(vocab.len());
    let mut state = grammar.init_state();
    if cfg.constraints && grammar.min_completion(&state) > cfg.max_len {
        return Err(DecodeError::Truncated { max_len: cfg.max_len, partial: TokenSequence::new() });
    }
    let bound = grammar.completion_bound();
    let mut out = TokenSequence::new();
    let mut logprob = 0.0;
    while out.len() < cfg.max_len {
        let mut logits = src.logits(prompt, &out);
        if let Some((_, temperature)) = &rng {
            logits.iter_mut().for_each(|l| *l /= temperature);
        }
        let mask = if cfg.constraints {
            let remaining = cfg.max_len - out.len();
            let mut mask = grammar.allowed_tokens(&state)?;
            if remaining <= bound {
                let mut within = TokenMask::empty(vocab.len());
                for t in mask.iter() {
                    if 1 + grammar.min_completion(&grammar.advance(&state, t)?) <= remaining {
                        within.insert(t);
                    }
                }
                mask = within;
            }
            mask
        } else {
            full.clone()
        };
        let probs = constrained_distribution(&logits, &mask)?;
        let tok = match &mut rng {
            Some((r, _)) => sample(&probs, &mask, r),
            None => argmax(&probs, &mask),
        };
        logprob += probs[tok.index()].ln();
        if cfg.constraints {
            // the mask is the enforcement point; advance re-checks it
            state = grammar.advance(&state, tok)?;
            out.push(tok);
            if state.is_accepting() {
                return Ok(DecodeOutput { tokens: out, logprob });
            }
        } else {
            if tok == vocab.eos() {
                return Ok(DecodeOutput { tokens: out, logprob });
            }
            out.push(tok);
        }
    }
    Err(DecodeError::Truncated { max_len: cfg.max_len, partial: out })
}

/// i.i.d. uniform logits in `[-scale, scale)`, derived from the seed and the
/// full decoding position.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    seed: u64,
    vocab_size: usize,
    scale: f64,
}

pub fn make_noise_source(seed: u64, vocab_size: usize) -> NoiseSource {
    NoiseSource { seed, vocab_size, scale: 1.0 }
}

impl NoiseSource {
    fn key(&self, prompt: &[TokenId], prefix: &[TokenId]) -> u64 {
        let mut h = mix64(self.seed);
        for t in prompt {
            h = mix64(h ^ u64::from(t.0));
        }
        h = mix64(h ^ 0xA5A5_A5A5);
        for t in prefix {
            h = mix64(h ^ u64::from(t.0));
        }
        mix64(h ^ prefix.len() as u64)
    }
}

impl LogitSource for NoiseSource {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn logits(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.key(prompt, prefix));
        (0..self.vocab_size).map(|_| rng.gen_range(-self.scale..self.scale)).collect()
    }
}

/// Puts a large finite margin on the next scripted token, then on EOS.
#[derive(Debug, Clone)]
pub struct ScriptedSource {
    script: TokenSequence,
    vocab_size: usize,
    eos: TokenId,
}

pub const SCRIPT_MARGIN: f64 = 1.0e6;

pub fn make_scripted_source(script: TokenSequence, vocab: &Vocab) -> ScriptedSource {
    ScriptedSource { script, vocab_size: vocab.len(), eos: vocab.eos() }
}

impl LogitSource for ScriptedSource {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn logits(&self, _prompt: &[TokenId], prefix: &[TokenId]) -> Vec<f64> {
        let mut l = vec![0.0; self.vocab_size];
        let next = self.script.get(prefix.len()).copied().unwrap_or(self.eos);
        l[next.index()] = SCRIPT_MARGIN;
        l
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::validate::validate_output;
    use std::collections::BTreeSet;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn masked_uniform_logits() {
        let mask = TokenMask::from_ids(4, [TokenId(0), TokenId(2)]);
        let p = constrained_distribution(&[1.0; 4], &mask).unwrap();
        assert!(close(&p, &[0.5, 0.0, 0.5, 0.0], 1e-15));
    }

    #[test]
    fn full_mask_is_softmax() {
        let logits = [0.3, -1.2, 2.5, 0.0];
        let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
        let expected: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        let p = constrained_distribution(&logits, &TokenMask::full(4)).unwrap();
        assert!(close(&p, &expected, 1e-12));
    }

    #[test]
    fn log_three_gives_quarter_split() {
        let p = constrained_distribution(&[0.0, 3f64.ln()], &TokenMask::full(2)).unwrap();
        assert!(close(&p, &[0.25, 0.75], 1e-12));
    }

    #[test]
    fn distribution_errors() {
        assert_eq!(
            constrained_distribution(&[0.0, 1.0], &TokenMask::empty(2)).unwrap_err(),
            DistributionError::EmptyMask
        );
        assert!(matches!(
            constrained_distribution(&[0.0, f64::NAN], &TokenMask::full(2)),
            Err(DistributionError::NonFinite { index: 1, .. })
        ));
    }

    struct Fixture {
        vocab: Vocab,
        schema: Schema,
        context: TokenSequence,
    }

    fn fixture() -> Fixture {
        let ctx = "U.N. official Ekeus heads for Baghdad";
        let mut alphabet: BTreeSet<char> = format!("{ctx}PersonLocati").chars().collect();
        alphabet.insert(' ');
        let vocab = Vocab::build(&alphabet, &[]).unwrap();
        let context = vocab.encode(ctx).unwrap();
        Fixture { vocab, schema: Schema::ner(&["Person", "Location"]).unwrap(), context }
    }

    #[test]
    fn scripted_valid_sequence_is_reproduced() {
        let f = fixture();
        let script = f.vocab.encode(r#"[{"Person":["Ekeus"]}]"#).unwrap();
        let src = make_scripted_source(script.clone(), &f.vocab);
        let out = decode(&src, &f.vocab, &f.schema, &[], &f.context, &DecodeConfig::default()).unwrap();
        assert_eq!(out.tokens, script);
        let empty = f.vocab.encode("[]").unwrap();
        let src = make_scripted_source(empty.clone(), &f.vocab);
        let out = decode(&src, &f.vocab, &f.schema, &[], &f.context, &DecodeConfig::default()).unwrap();
        assert_eq!(out.tokens, empty);
    }

    #[test]
    fn scripted_unconstrained_stops_at_eos() {
        let f = fixture();
        let script = f.vocab.encode("[{oo").unwrap();
        let src = make_scripted_source(script.clone(), &f.vocab);
        let cfg = DecodeConfig { constraints: false, ..DecodeConfig::default() };
        let out = decode(&src, &f.vocab, &f.schema, &[], &f.context, &cfg).unwrap();
        assert_eq!(out.tokens, script);
    }

    #[test]
    fn noise_decodes_are_valid_and_seeded() {
        let f = fixture();
        let mut outputs = BTreeSet::new();
        for seed in 0..200 {
            let src = make_noise_source(seed, f.vocab.len());
            let cfg = DecodeConfig { max_len: 4096, ..DecodeConfig::default() };
            let out = decode(&src, &f.vocab, &f.schema, &[], &f.context, &cfg).unwrap();
            let again = decode(&src, &f.vocab, &f.schema, &[], &f.context, &cfg).unwrap();
            assert_eq!(out, again);
            let text = f.vocab.decode(&out.tokens).unwrap();
            validate_output(&f.vocab, &f.schema, &f.context, &text).unwrap();
            outputs.insert(text);
        }
        assert!(outputs.len() > 50, "only {} distinct outputs", outputs.len());
    }

    #[test]
    fn sampling_is_reproducible_from_seed() {
        let f = fixture();
        let src = make_noise_source(3, f.vocab.len());
        let cfg = |seed| DecodeConfig {
            strategy: Strategy::Sample { temperature: 3.0, seed },
            max_len: 4096,
            constraints: true,
        };
        let a = decode(&src, &f.vocab, &f.schema, &[], &f.context, &cfg(1)).unwrap();
        let b = decode(&src, &f.vocab, &f.schema, &[], &f.context, &cfg(1)).unwrap();
        assert_eq!(a, b);
        let distinct: BTreeSet<_> = (0..50)
            .map(|s| decode(&src, &f.vocab, &f.schema, &[], &f.context, &cfg(s)).unwrap().tokens)
            .collect();
        assert!(distinct.len() > 1, "{distinct:?}");
    }

    #[test]
    fn truncation_carries_partial_output() {
        let f = fixture();
        let script = f.vocab.encode(r#"[{"Person":["Ekeus"]}]"#).unwrap();
        let src = make_scripted_source(script.clone(), &f.vocab);
        let cfg = DecodeConfig { max_len: 5, constraints: false, ..DecodeConfig::default() };
        match decode(&src, &f.vocab, &f.schema, &[], &f.context, &cfg) {
            Err(DecodeError::Truncated { partial, max_len: 5 }) => assert_eq!(&*partial, &script[..5]),
            other => panic!("expected truncation, got {other:?}"),
        }
        let cfg = DecodeConfig { max_len: 1, ..DecodeConfig::default() };
        match decode(&src, &f.vocab, &f.schema, &[], &f.context, &cfg) {
            Err(DecodeError::Truncated { partial, max_len: 1 }) => assert!(partial.is_empty()),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn tight_budget_closes_the_output() {
        let f = fixture();
        let script = f.vocab.encode(r#"[{"Person":["Ekeus"]}]"#).unwrap();
        let src = make_scripted_source(script.clone(), &f.vocab);
        let cfg = |max_len| DecodeConfig { max_len, ..DecodeConfig::default() };
        let out = decode(&src, &f.vocab, &f.schema, &[], &f.context, &cfg(5)).unwrap();
        assert_eq!(f.vocab.decode(&out.tokens).unwrap(), "[]");
        let out = decode(&src, &f.vocab, &f.schema, &[], &f.context, &cfg(script.len())).unwrap();
        assert_eq!(out.tokens, script);
        for seed in 0..300 {
            let noise = make_noise_source(seed, f.vocab.len());
            let max_len = 2 + seed as usize % 40;
            let out = decode(&noise, &f.vocab, &f.schema, &[], &f.context, &cfg(max_len)).unwrap();
            assert!(out.tokens.len() <= max_len);
            let text = f.vocab.decode(&out.tokens).unwrap();
            validate_output(&f.vocab, &f.schema, &f.context, &text).unwrap();
        }
    }

    #[test]
    fn bad_configs_are_rejected() {
        let f = fixture();
        let src = make_noise_source(0, f.vocab.len());
        let cfg = DecodeConfig { max_len: 0, ..DecodeConfig::default() };
        assert!(matches!(decode(&src, &f.vocab, &f.schema, &[], &f.context, &cfg), Err(DecodeError::Config(_))));
        let cfg = DecodeConfig {
            strategy: Strategy::Sample { temperature: 0.0, seed: 0 },
            ..DecodeConfig::default()
        };
        assert!(matches!(decode(&src, &f.vocab, &f.schema, &[], &f.context, &cfg), Err(DecodeError::Config(_))));
    }
}
