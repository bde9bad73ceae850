//! Output validator that shares no code with the grammar automaton.
//!
//! A candidate passes when it parses as JSON in the task's shape, uses only
//! schema labels (and roles), and every extracted string equals the text of
//! some contiguous token run of the context.

use std::collections::HashSet;

use crate::extraction::{Extraction, ParseError};
use crate::grammar::Schema;
use crate::vocab::{TokenId, Vocab};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ValidationError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("span {0:?} is not a contiguous token run of the context")]
    SpanNotInContext(String),
}

/// Validator bound to one context.
pub struct Validator<'a> {
    schema: &'a Schema,
    runs: HashSet<String>,
}

impl<'a> Validator<'a> {
    pub fn new(vocab: &Vocab, schema: &'a Schema, context: &[TokenId]) -> Self {
        let pieces: Vec<&str> = context.iter().map(|&t| vocab.token(t).unwrap_or("")).collect();
        let mut runs = HashSet::new();
        for i in 0..pieces.len() {
            let mut s = String::new();
            for p in &pieces[i..] {
                s.push_str(p);
                runs.insert(s.clone());
            }
        }
        Self { schema, runs }
    }

    pub fn check(&self, text: &str) -> Result<Extraction, ValidationError> {
        let x = Extraction::parse(text, self.schema)?;
        if let Some(bad) = x.spans().into_iter().find(|s| !self.runs.contains(*s)) {
            return Err(ValidationError::SpanNotInContext(bad.to_string()));
        }
        Ok(x)
    }
}

pub fn validate_output(
    vocab: &Vocab,
    schema: &Schema,
    context: &[TokenId],
    text: &str,
) -> Result<Extraction, ValidationError> {
    Validator::new(vocab, schema, context).check(text)
}
