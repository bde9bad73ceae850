//! Incremental contiguous-subsequence matcher over a context token sequence.
//!
//! A [`SpanCursor`] tracks every context position at which the span generated
//! so far occurs. Stepping a cursor filters those positions by the next
//! context token, so one step costs `O(active starts)`; the very first step
//! from the start cursor reads the occurrence list of the stepped token
//! directly and costs `O(occurrences)`.

use std::collections::{BTreeMap, BTreeSet};

use crate::vocab::{TokenId, TokenSequence};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SpanError {
    #[error("context must contain at least one token")]
    EmptyContext,
    #[error("cannot step a dead span cursor")]
    DeadCursor,
}

/// Occurrence index over a single context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanTrie {
    context: TokenSequence,
    occurrences: BTreeMap<TokenId, Vec<u32>>,
}

/// Positions where the current partial span matches, all with the same length.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SpanCursor {
    starts: Vec<u32>,
    len: u32,
}

impl SpanCursor {
    pub fn is_dead(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn matched_len(&self) -> usize {
        self.len as usize
    }

    /// Context positions at which the current span starts.
    pub fn starts(&self) -> &[u32] {
        &self.starts
    }
}

impl SpanTrie {
    pub fn build(context: TokenSequence) -> Result<Self, SpanError> {
        if context.is_empty() {
            return Err(SpanError::EmptyContext);
        }
        let mut occurrences: BTreeMap<TokenId, Vec<u32>> = BTreeMap::new();
        for (i, &t) in context.iter().enumerate() {
            occurrences.entry(t).or_default().push(i as u32);
        }
        Ok(Self { context, occurrences })
    }

    pub fn context(&self) -> &TokenSequence {
        &self.context
    }

    /// Sorted positions of `tok` in the context.
    pub fn positions(&self, tok: TokenId) -> &[u32] {
        self.occurrences.get(&tok).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn distinct_tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.occurrences.keys().copied()
    }

    /// Cursor for the empty span, alive at every position.
    pub fn start(&self) -> SpanCursor {
        SpanCursor { starts: (0..self.context.len() as u32).collect(), len: 0 }
    }

    /// Extends the span by `tok`. The returned cursor is dead when `tok` is
    /// not a legal continuation.
    pub fn step(&self, cursor: &SpanCursor, tok: TokenId) -> Result<SpanCursor, SpanError> {
        if cursor.is_dead() {
            return Err(SpanError::DeadCursor);
        }
        let starts = if cursor.len == 0 {
            self.positions(tok).to_vec()
        } else {
            let ctx = &self.context;
            cursor
                .starts
                .iter()
                .copied()
                .filter(|&s| ctx.get((s + cursor.len) as usize) == Some(&tok))
                .collect()
        };
        Ok(SpanCursor { starts, len: cursor.len + 1 })
    }

    /// Tokens that extend the current span and keep it inside the context.
    pub fn allowed_continuations(&self, cursor: &SpanCursor) -> BTreeSet<TokenId> {
        let mut out = BTreeSet::new();
        self.for_each_continuation(cursor, |t| {
            out.insert(t);
        });
        out
    }

    /// Visits every continuation token, possibly more than once.
    pub fn for_each_continuation(&self, cursor: &SpanCursor, mut f: impl FnMut(TokenId)) {
        if cursor.len == 0 && !cursor.starts.is_empty() {
            self.occurrences.keys().for_each(|&t| f(t));
            return;
        }
        for &s in &cursor.starts {
            if let Some(&t) = self.context.get((s + cursor.len) as usize) {
                f(t);
            }
        }
    }

    /// Walks `span` from the start cursor; dead if it does not occur.
    pub fn match_span(&self, span: &[TokenId]) -> SpanCursor {
        let mut cur = self.start();
        for &t in span {
            cur = match self.step(&cur, t) {
                Ok(c) => c,
                Err(_) => return cur,
            };
        }
        cur
    }
}
