use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const SEP: TokenId = 4;

const RESERVED: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<sep>"];

/// Token ↔ id bijection with five reserved ids at the front.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from(RESERVED.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }
}

impl Vocabulary {
    /// Builds a vocabulary from token streams, keeping tokens seen at least
    /// `min_count` times. Ids after the reserved block are assigned by
    /// descending frequency, ties broken lexicographically, so the result is
    /// independent of input order.
    pub fn build<'a, I, S>(streams: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for stream in streams {
            for tok in stream {
                *counts.entry(tok.as_ref().to_string()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t));
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn is_reserved(id: TokenId) -> bool {
        id < RESERVED.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}
