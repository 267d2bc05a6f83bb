use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const MASK: &str = "[MASK]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const BOS: &str = "[BOS]";

/// Token/id bijection. The four special tokens occupy ids 0..4 and the rest
/// are sorted, so the same token set always yields the same ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const MASK_ID: usize = 0;
    pub const PAD_ID: usize = 1;
    pub const UNK_ID: usize = 2;
    pub const BOS_ID: usize = 3;

    pub fn build<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let specials = [MASK, PAD, UNK, BOS];
        let rest: BTreeSet<String> = tokens
            .into_iter()
            .map(|t| t.as_ref().to_string())
            .filter(|t| !specials.contains(&t.as_str()))
            .collect();
        let all: Vec<String> = specials
            .iter()
            .map(|s| s.to_string())
            .chain(rest)
            .collect();
        Vocabulary::from(all)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps tokens to ids, substituting UNK (with a logged warning) for
    /// anything outside the vocabulary.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| {
                let t = t.as_ref();
                self.id(t).unwrap_or_else(|| {
                    log::warn!("token `{t}` not in vocabulary, scoring as {UNK}");
                    Self::UNK_ID
                })
            })
            .collect()
    }

    /// Tokens from `required` that are not in the vocabulary, sorted.
    pub fn missing<'a, I>(&self, required: I) -> Vec<String>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let missing: BTreeSet<String> = required
            .into_iter()
            .filter(|t| self.id(t).is_none())
            .map(str::to_string)
            .collect();
        missing.into_iter().collect()
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}
