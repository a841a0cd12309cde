//! Whitespace/punctuation tokenizer and frequency vocabulary.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::table::Corpus;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
/// Ids below this value are reserved.
pub const N_SPECIAL: usize = 5;
pub const SPECIAL_TOKENS: [&str; N_SPECIAL] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Lowercases, splits on whitespace, and emits every non-alphanumeric
/// character as its own token.
pub fn tokenize(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in s.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(core::mem::take(&mut cur));
            }
        } else if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(core::mem::take(&mut cur));
            }
            out.push(ch.to_lowercase().collect());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Token/id bijection with fixed reserved ids `[PAD] [UNK] [CLS] [SEP] [MASK]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Builds from an id-ordered token list whose first entries are the specials.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < N_SPECIAL
            || tokens.iter().zip(SPECIAL_TOKENS).any(|(t, s)| t != s)
        {
            return Err(Error::InvalidConfig {
                name: "vocab",
                reason: "first five tokens must be [PAD] [UNK] [CLS] [SEP] [MASK]".to_string(),
            });
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidConfig {
                    name: "vocab",
                    reason: alloc::format!("token {i} is empty or contains whitespace"),
                });
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidConfig {
                    name: "vocab",
                    reason: alloc::format!("duplicate token {t:?}"),
                });
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn specials_only() -> Self {
        Self::from_tokens(SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect())
            .expect("specials are valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK))
            .collect()
    }

    /// Inverse of [`Vocab::encode`]; ids out of range decode to `[UNK]`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(SPECIAL_TOKENS[UNK]).to_string())
            .collect()
    }

    /// Tokenizes then encodes.
    pub fn encode_text(&self, s: &str) -> Vec<usize> {
        self.encode(&tokenize(s))
    }

    /// The vocab file body: one token per line, line number = id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    /// Hex SHA-256 of [`Vocab::to_file_string`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        digest.iter().map(|b| alloc::format!("{b:02x}")).collect()
    }
}

/// Vocabulary of every token with corpus frequency `>= min_freq`, ordered by
/// descending frequency then lexicographically. Text and all table cells count.
pub fn build_vocab(corpus: &Corpus, min_freq: usize) -> Vocab {
    let min_freq = min_freq.max(1);
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for pair in corpus.pairs() {
        let cells = pair.table.cells().map(|(_, _, c)| c);
        for text in core::iter::once(pair.text.as_str()).chain(cells) {
            for tok in tokenize(text) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
    }
    let mut entries: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq && !SPECIAL_TOKENS.contains(&t.as_str()))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(entries.into_iter().map(|(t, _)| t));
    Vocab::from_tokens(tokens).expect("corpus tokens are non-empty and unique")
}
