//! Word-level tokenizer: alphanumeric runs and single punctuation marks.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
const SPECIALS: [&str; 2] = ["[PAD]", "[UNK]"];

/// Splits on whitespace, keeping runs of alphanumerics (and apostrophes
/// inside words) together and emitting every other symbol on its own.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let is_word = |c: char| c.is_alphanumeric() || c == '\'';
    for (i, c) in text.char_indices() {
        if is_word(c) {
            start.get_or_insert(i);
            continue;
        }
        if let Some(s) = start.take() {
            out.push(&text[s..i]);
        }
        if !c.is_whitespace() {
            out.push(&text[i..i + c.len_utf8()]);
        }
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    out
}

fn glues_left(tok: &str) -> bool {
    matches!(tok, "." | "," | ";" | ":" | "!" | "?" | ")" | "%")
}

fn glues_right(tok: &str) -> bool {
    tok == "("
}

/// Joins words back into text. Inverse of [`split_words`] for text written
/// with single spaces and conventional punctuation spacing.
pub fn join_words<S: AsRef<str>>(words: &[S]) -> String {
    let mut out = String::new();
    let mut prev: Option<&str> = None;
    for w in words {
        let w = w.as_ref();
        if let Some(p) = prev {
            if !glues_left(w) && !glues_right(p) {
                out.push(' ');
            }
        }
        out.push_str(w);
        prev = Some(w);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Vocabulary over every word in `texts`, in sorted order after the
    /// special tokens.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<&str> = texts.into_iter().flat_map(split_words).collect();
        Self::from_tokens(
            SPECIALS
                .iter()
                .copied()
                .chain(words.into_iter().filter(|w| !SPECIALS.contains(w)))
                .map(String::from)
                .collect(),
        )
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    /// Restores the lookup table after deserialization.
    pub fn reindexed(self) -> Self {
        Self::from_tokens(self.tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or("[UNK]", String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text).into_iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids.iter().map(|&i| self.token(i)).collect();
        join_words(&words)
    }
}
