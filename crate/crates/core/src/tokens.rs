//! Token ids, reserved symbols and the vocabulary table.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub type TokenId = u32;

/// A caption as vocabulary indices.
pub type TokenSequence = Vec<TokenId>;

/// Loss-ignored padding.
pub const PAD: TokenId = 0;
/// Start symbol fed to every autoregressive pass.
pub const BOG: TokenId = 1;
/// End of sentence.
pub const EOS: TokenId = 2;
/// Placeholder the filler has to predict.
pub const MASK: TokenId = 3;
/// First id available for ordinary words.
pub const FIRST_WORD: TokenId = 4;

pub const SPECIAL_NAMES: [&str; 4] = ["[pad]", "[bog]", "[eos]", "[mask]"];

/// Whether a decoder is allowed to emit `t` (words and `[eos]`).
#[inline]
pub fn is_emittable(t: TokenId) -> bool {
    t == EOS || t >= FIRST_WORD
}

/// Cuts `s` at the first `[eos]`.
pub fn truncate_at_eos(s: &[TokenId]) -> &[TokenId] {
    match s.iter().position(|&t| t == EOS) {
        Some(p) => &s[..p],
        None => s,
    }
}

/// Bidirectional map between words and ids. Ids `0..4` are the reserved
/// symbols.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn new<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut all: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        all.extend(words.iter().map(|w| w.as_ref().to_string()));
        Self::from_all(all)
    }

    /// Builds from a full listing whose first four entries are the reserved
    /// symbols.
    pub fn from_all(all: Vec<String>) -> Result<Self> {
        if all.len() < SPECIAL_NAMES.len() || all[..4] != SPECIAL_NAMES {
            return Err(Error::Format("vocabulary must start with the reserved symbols".into()));
        }
        let mut index = HashMap::new();
        for (i, w) in all.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("invalid vocabulary entry {w:?}")));
            }
            if index.insert(w.clone(), i as TokenId).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Self { words: all, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn entries(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::Format(format!("unknown word {w:?}"))))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or("[unk]"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
