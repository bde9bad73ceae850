use std::fmt;

use crate::vocab::TokenId;

/// Allowed-next-token set over a vocabulary, stored as a bitset.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct TokenMask {
    bits: Vec<u64>,
    vocab_size: usize,
}

impl TokenMask {
    pub fn empty(vocab_size: usize) -> Self {
        Self { bits: vec![0; vocab_size.div_ceil(64)], vocab_size }
    }

    pub fn full(vocab_size: usize) -> Self {
        let mut m = Self::empty(vocab_size);
        for i in 0..vocab_size {
            m.insert(TokenId::from(i));
        }
        m
    }

    pub fn from_ids(vocab_size: usize, ids: impl IntoIterator<Item = TokenId>) -> Self {
        let mut m = Self::empty(vocab_size);
        for id in ids {
            m.insert(id);
        }
        m
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Panics if `id` is outside the vocabulary.
    pub fn insert(&mut self, id: TokenId) {
        let i = id.index();
        assert!(i < self.vocab_size, "token {id} outside mask of size {}", self.vocab_size);
        self.bits[i / 64] |= 1 << (i % 64);
    }

    pub fn contains(&self, id: TokenId) -> bool {
        let i = id.index();
        i < self.vocab_size && self.bits[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&w| w == 0)
    }

    /// Allowed ids in increasing order.
    pub fn iter(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.bits.iter().enumerate().flat_map(|(w, &word)| {
            let mut rest = word;
            std::iter::from_fn(move || {
                if rest == 0 {
                    return None;
                }
                let b = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                Some(TokenId::from(w * 64 + b))
            })
        })
    }
}

impl fmt::Debug for TokenMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter().map(|t| t.0)).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_iter_count() {
        let m = TokenMask::from_ids(130, [0, 63, 64, 129].map(TokenId));
        assert_eq!(m.count(), 4);
        assert_eq!(m.iter().map(|t| t.0).collect::<Vec<_>>(), vec![0, 63, 64, 129]);
        assert!(m.contains(TokenId(64)) && !m.contains(TokenId(65)));
        assert!(!m.contains(TokenId(500)));
        assert_eq!(TokenMask::full(130).count(), 130);
        assert!(TokenMask::empty(3).is_empty());
    }
}
