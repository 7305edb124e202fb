//! Whitespace word tokenizer used by the desk-scale backbone.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SEP: u32 = 4;

const SPECIALS: [&str; 5] = ["[PAD]", "[BOS]", "[EOS]", "[UNK]", "[SEP]"];

/// Enumeration markers placed before list items ("A.", "B.", ...).
pub const ENUM_MARKERS: [&str; 10] = ["A.", "B.", "C.", "D.", "E.", "F.", "G.", "H.", "I.", "J."];

pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<u32>;
    fn decode(&self, ids: &[u32]) -> String;
    fn vocab_size(&self) -> usize;
    /// Reserved separator between list items.
    fn sep_id(&self) -> u32 {
        SEP
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct WordTokenizer {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for WordTokenizer {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }
}

impl From<WordTokenizer> for Vec<String> {
    fn from(t: WordTokenizer) -> Self {
        t.tokens
    }
}

impl WordTokenizer {
    /// Vocabulary of the special tokens and enumeration markers only.
    pub fn base() -> Self {
        SPECIALS
            .iter()
            .chain(ENUM_MARKERS.iter())
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .into()
    }

    /// Builds a vocabulary from `texts`, keeping the `max_vocab` most frequent
    /// words (ties broken lexicographically) after the reserved tokens.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>, max_vocab: usize) -> Self {
        let mut base = Self::base();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for word in text.split_whitespace() {
                if !base.index.contains_key(word) {
                    *counts.entry(word).or_default() += 1;
                }
            }
        }
        let mut words: Vec<(&str, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let room = max_vocab.saturating_sub(base.tokens.len());
        for (w, _) in words.into_iter().take(room) {
            base.index.insert(w.to_string(), base.tokens.len() as u32);
            base.tokens.push(w.to_string());
        }
        base
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }
}

impl Tokenizer for WordTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK))
            .collect()
    }

    fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.token(id).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn vocab_size(&self) -> usize {
        self.tokens.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_encode_decode() {
        let tok = WordTokenizer::fit(["b a a", "c b a"], 100);
        assert_eq!(tok.vocab_size(), 15 + 3);
        assert_eq!(tok.id("a"), Some(15));
        assert_eq!(tok.id("b"), Some(16));
        assert_eq!(tok.encode("a zzz c"), vec![15, UNK, 17]);
        assert_eq!(tok.decode(&[BOS, 15, 17, EOS]), "a c");
        assert_eq!(tok.encode("A."), vec![5]);
    }

    #[test]
    fn vocab_cap_and_serde() {
        let tok = WordTokenizer::fit(["x y z x"], 16);
        assert_eq!(tok.vocab_size(), 16);
        assert_eq!(tok.id("x"), Some(15));
        let json = serde_json::to_string(&tok).unwrap();
        let back: WordTokenizer = serde_json::from_str(&json).unwrap();
        assert_eq!(back, tok);
    }
}
