//! Deterministic toy vocabulary with greedy longest-match tokenization.
//!
//! Every structural JSON character is its own single-character token, so the
//! output-format automaton in [`crate::grammar`] can work purely on token ids.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// JSON punctuation, in id order. These are always ids `0..7`.
pub const STRUCTURAL_CHARS: [char; 7] = ['[', ']', '{', '}', '"', ':', ','];

pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for TokenId {
    fn from(i: usize) -> Self {
        TokenId(i as u32)
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// An ordered run of token ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    pub fn push(&mut self, id: TokenId) {
        self.0.push(id);
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }
}

impl Deref for TokenSequence {
    type Target = [TokenId];
    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(v: Vec<TokenId>) -> Self {
        Self(v)
    }
}

impl FromIterator<TokenId> for TokenSequence {
    fn from_iter<I: IntoIterator<Item = TokenId>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("alphabet must not be empty")]
    EmptyAlphabet,
    #[error("duplicate token {0:?}")]
    DuplicateToken(String),
    #[error("empty token string")]
    EmptyToken,
    #[error("character {ch:?} at position {position} is not covered by any token")]
    Uncovered { position: usize, ch: char },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("invalid vocabulary file: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(String),
}

/// Serialized layout: `{"tokens": [...], "bos": id, "eos": id}`.
#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    bos: u32,
    eos: u32,
}

/// Immutable token alphabet. Ids are dense `0..len()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    id_of: HashMap<String, TokenId>,
    bos: TokenId,
    eos: TokenId,
    /// Longest token length in chars, for the greedy matcher.
    max_chars: usize,
}

impl Vocab {
    /// Builds a vocabulary from an alphabet of single characters plus
    /// multi-character extras.
    ///
    /// Ids are assigned as: structural characters, the alphabet in sorted
    /// order (structural characters already present are skipped), extras in
    /// the given order, then BOS and EOS.
    pub fn build(alphabet: &BTreeSet<char>, extra_tokens: &[String]) -> Result<Self, VocabError> {
        if alphabet.is_empty() {
            return Err(VocabError::EmptyAlphabet);
        }
        let mut tokens: Vec<String> = STRUCTURAL_CHARS.iter().map(|c| c.to_string()).collect();
        tokens.extend(
            alphabet
                .iter()
                .filter(|c| !STRUCTURAL_CHARS.contains(c))
                .map(|c| c.to_string()),
        );
        tokens.extend(extra_tokens.iter().cloned());
        tokens.push(BOS_TOKEN.to_string());
        tokens.push(EOS_TOKEN.to_string());
        let bos = TokenId::from(tokens.len() - 2);
        let eos = TokenId::from(tokens.len() - 1);
        Self::from_parts(tokens, bos, eos)
    }

    fn from_parts(tokens: Vec<String>, bos: TokenId, eos: TokenId) -> Result<Self, VocabError> {
        let mut id_of = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(VocabError::EmptyToken);
            }
            if id_of.insert(t.clone(), TokenId::from(i)).is_some() {
                return Err(VocabError::DuplicateToken(t.clone()));
            }
        }
        for (i, c) in STRUCTURAL_CHARS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(c.encode_utf8(&mut [0; 4])) {
                return Err(VocabError::Invalid(format!("structural token {c:?} must have id {i}")));
            }
        }
        for id in [bos, eos] {
            if id.index() >= tokens.len() {
                return Err(VocabError::IdOutOfRange { id: id.0, size: tokens.len() });
            }
            if id.index() < STRUCTURAL_CHARS.len() {
                return Err(VocabError::Invalid("bos/eos must not be structural".into()));
            }
        }
        if bos == eos {
            return Err(VocabError::Invalid("bos and eos must differ".into()));
        }
        let max_chars = tokens
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != bos.index() && *i != eos.index())
            .map(|(_, t)| t.chars().count())
            .max()
            .unwrap_or(1);
        Ok(Self { tokens, id_of, bos, eos, max_chars })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id.index()).map(String::as_str)
    }

    /// Id of a structural JSON character. Panics on non-structural input.
    pub fn structural(&self, c: char) -> TokenId {
        let pos = STRUCTURAL_CHARS
            .iter()
            .position(|&s| s == c)
            .unwrap_or_else(|| panic!("{c:?} is not a structural character"));
        TokenId::from(pos)
    }

    pub fn structural_ids(&self) -> impl Iterator<Item = TokenId> {
        (0..STRUCTURAL_CHARS.len()).map(TokenId::from)
    }

    pub fn is_structural(&self, id: TokenId) -> bool {
        id.index() < STRUCTURAL_CHARS.len()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.bos || id == self.eos
    }

    /// Greedy longest-match tokenization. BOS/EOS are never produced.
    pub fn encode(&self, text: &str) -> Result<TokenSequence, VocabError> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = TokenSequence::new();
        let mut pos = 0;
        let mut buf = String::new();
        while pos < chars.len() {
            let longest = self.max_chars.min(chars.len() - pos);
            let hit = (1..=longest).rev().find_map(|n| {
                buf.clear();
                buf.extend(&chars[pos..pos + n]);
                self.id_of
                    .get(buf.as_str())
                    .filter(|id| !self.is_special(**id))
                    .map(|id| (*id, n))
            });
            match hit {
                Some((id, n)) => {
                    out.push(id);
                    pos += n;
                }
                None => return Err(VocabError::Uncovered { position: pos, ch: chars[pos] }),
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String, VocabError> {
        let mut s = String::new();
        for &id in ids {
            let t = self
                .token(id)
                .ok_or(VocabError::IdOutOfRange { id: id.0, size: self.len() })?;
            s.push_str(t);
        }
        Ok(s)
    }

    pub fn check_ids(&self, ids: &[TokenId]) -> Result<(), VocabError> {
        match ids.iter().find(|id| id.index() >= self.len()) {
            Some(id) => Err(VocabError::IdOutOfRange { id: id.0, size: self.len() }),
            None => Ok(()),
        }
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile { tokens: self.tokens.clone(), bos: self.bos.0, eos: self.eos.0 };
        serde_json::to_string(&file).expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, VocabError> {
        let file: VocabFile =
            serde_json::from_str(text).map_err(|e| VocabError::Invalid(e.to_string()))?;
        Self::from_parts(file.tokens, TokenId(file.bos), TokenId(file.eos))
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| VocabError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| VocabError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
