use std::collections::HashMap;

use super::RawCorpus;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;

/// Whitespace-token vocabulary with reserved ids `PAD = 0` and `UNK = 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Assigns ids 2, 3, ... in the given order.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut all = vec!["<pad>".to_string(), "<unk>".to_string()];
        all.extend(tokens);
        let index = all.iter().enumerate().skip(2).map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocabulary { tokens: all, index }
    }

    /// Number of ids including the two reserved ones.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Whitespace split, lookup, truncation to `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Vec<u32> {
        text.split_whitespace().take(max_len).map(|t| self.id(t)).collect()
    }
}

/// Counts tokens over all `corpora` and keeps those seen at least
/// `min_count` times, most frequent first, ties broken lexicographically.
pub fn build_vocab(corpora: &[&RawCorpus], min_count: usize) -> Result<Vocabulary> {
    if min_count == 0 {
        return Err(Error::config("min_count", "must be at least 1"));
    }
    if corpora.is_empty() || corpora.iter().all(|c| c.rows.is_empty()) {
        return Err(Error::input("build_vocab: no text to count"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for c in corpora {
        for text in c.texts() {
            for tok in text.split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, n)| n >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()).collect()))
}
