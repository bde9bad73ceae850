//! Span-grounded constrained decoding for information extraction.
//!
//! The crate is organised bottom-up:
//!
//! * [`vocab`]: toy tokenizer with single-token JSON punctuation.
//! * [`span_index`]: incremental matcher for "the span occurs in the context".
//! * [`grammar`]: the output-format automaton producing allowed-token masks.
//! * [`decode`]: the masked decoding loop over any [`decode::LogitSource`].
//! * [`losses`]: SFT, reward-model and KL-regularised RL objectives, a tiny
//!   trainable language model and the trainers built on them.
//! * [`data_forge`]: training records, negatives and synthetic corpora.
//! * [`metrics`]: span-level P/R/F1 and ROUGE-1.
//! * [`pipeline`]: the SFT, reward-model and RL toy run with default sizes.
//! * [`validate`]: a grammar-independent output validator.

pub mod data_forge;
pub mod decode;
pub mod extraction;
pub mod grammar;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod span_index;
pub mod validate;
pub mod vocab;

pub use decode::{decode, DecodeConfig, DecodeError, DecodeOutput, LogitSource, Strategy};
pub use extraction::{Event, Extraction, NerObject, Relation};
pub use grammar::{CompiledSchema, Grammar, GrammarError, GrammarState, Schema, Task, TokenMask};
pub use metrics::PrfReport;
pub use span_index::{SpanCursor, SpanTrie};
pub use vocab::{TokenId, TokenSequence, Vocab};
