use std::collections::HashMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const PAD: usize = 0;
/// Unknown word, or "no tag"/"no relation" in the tag vocabularies.
pub const UNK: usize = 1;

/// Bijective token ↔ id map. Ids 0 and 1 are reserved for padding and
/// unknown entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::with_specials("<pad>", "<unk>")
    }

    pub fn with_specials(pad: &str, unk: &str) -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.insert(pad);
        v.insert(unk);
        v
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Returns the id of `token`, adding it if needed.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, falling back to [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
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
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        if tokens.len() < 2 {
            return Err(serde::de::Error::custom(
                "vocabulary lacks reserved entries",
            ));
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// The four vocabularies a model is tied to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabs {
    pub words: Vocabulary,
    pub pos: Vocabulary,
    pub ner: Vocabulary,
    pub rel: Vocabulary,
}

impl Default for Vocabs {
    fn default() -> Self {
        Vocabs {
            words: Vocabulary::new(),
            pos: Vocabulary::with_specials("<pad>", "<none>"),
            ner: Vocabulary::with_specials("<pad>", "<none>"),
            rel: Vocabulary::with_specials("<pad>", "<none>"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_unknown_fallback() {
        let mut v = Vocabulary::new();
        let a = v.insert("bed");
        assert_eq!(a, 2);
        assert_eq!(v.insert("bed"), 2);
        assert_eq!(v.id("sleep"), UNK);
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.token(2), Some("bed"));
    }

    #[test]
    fn serde_keeps_ids() {
        let mut v = Vocabulary::new();
        for w in ["x", "y", "z"] {
            v.insert(w);
        }
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("z"), 4);
    }
}
