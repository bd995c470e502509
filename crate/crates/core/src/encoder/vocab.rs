//! Word-level vocabulary and tokenizer with reserved special tokens.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;

/// Ordered token-string to id mapping. Ids `0..4` are reserved for
/// PAD, BOS, EOS and UNK; ordinary tokens start at 4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

/// Lowercases, drops punctuation, and splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

impl Vocab {
    /// Builds a vocabulary from every normalized word in `corpus`, sorted
    /// lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Self {
        let words: BTreeSet<String> = corpus.iter().flat_map(|s| normalize(s.as_ref())).collect();
        Self::from_tokens(words.into_iter().collect()).expect("deduplicated words")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocab token {t:?}")));
            }
            if index.insert(t.clone(), i + NUM_RESERVED).is_some() {
                return Err(Error::Config(format!("duplicate vocab token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Total id space including reserved slots.
    pub fn len(&self) -> usize {
        self.tokens.len() + NUM_RESERVED
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        match id {
            PAD => Some("<pad>"),
            BOS => Some("<bos>"),
            EOS => Some("<eos>"),
            UNK => Some("<unk>"),
            _ => self.tokens.get(id - NUM_RESERVED).map(String::as_str),
        }
    }

    /// Non-reserved tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; line `i` holds id `i + 4`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    /// `BOS word... EOS PAD...`, truncated so the real length fits in
    /// `max_tokens`; EOS is always kept.
    pub fn tokenize(&self, text: &str, max_tokens: usize) -> Result<TokenSequence> {
        if max_tokens < 2 {
            return Err(Error::Config(format!("max_tokens {max_tokens} < 2")));
        }
        let mut ids = Vec::with_capacity(max_tokens);
        ids.push(BOS);
        ids.extend(
            normalize(text)
                .iter()
                .take(max_tokens - 2)
                .map(|w| self.id(w).unwrap_or(UNK)),
        );
        ids.push(EOS);
        let real_len = ids.len();
        ids.resize(max_tokens, PAD);
        Ok(TokenSequence { ids, real_len })
    }
}

/// Exactly `T` token ids with the count of non-pad positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub real_len: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self, vocab_size: usize, max_tokens: usize) -> Result<()> {
        let ok = self.ids.len() == max_tokens
            && self.real_len >= 2
            && self.real_len <= max_tokens
            && self.ids[0] == BOS
            && self.ids[self.real_len - 1] == EOS
            && self.ids[self.real_len..].iter().all(|&i| i == PAD)
            && self.ids.iter().all(|&i| i < vocab_size);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "malformed token sequence {:?} (real_len {}) for vocab {vocab_size}, T {max_tokens}",
                self.ids, self.real_len
            )))
        }
    }
}
