//! Whitespace tokenizer over a fixed word → id vocabulary.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{SpecialIds, TokenSequence};
use crate::error::{Error, Result};

pub const SOS: &str = "<sos>";
pub const EOS: &str = "<eos>";
pub const MASK: &str = "<mask>";
pub const PAD: &str = "<pad>";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocab {
    words: BTreeMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary with the four special tokens at ids 0..4 followed
    /// by `words` in order (duplicates ignored).
    pub fn with_specials<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut map = BTreeMap::new();
        for (i, w) in [SOS, EOS, MASK, PAD].into_iter().enumerate() {
            map.insert(w.to_string(), i as u32);
        }
        let mut next = map.len() as u32;
        for w in words {
            if !map.contains_key(w) {
                map.insert(w.to_string(), next);
                next += 1;
            }
        }
        Self { words: map }
    }

    pub fn from_map(words: BTreeMap<String, u32>) -> Self {
        Self { words }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("vocab", e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// One past the largest id in use.
    pub fn id_bound(&self) -> usize {
        self.words.values().max().map_or(0, |&m| m as usize + 1)
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.words.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words
            .iter()
            .find(|(_, &v)| v == id)
            .map(|(k, _)| k.as_str())
    }

    /// Id → word table, `None` for unused ids.
    pub fn inverse(&self) -> Vec<Option<String>> {
        let mut out = vec![None; self.id_bound()];
        for (w, &id) in &self.words {
            out[id as usize] = Some(w.clone());
        }
        out
    }

    pub fn specials(&self) -> Result<SpecialIds> {
        let get = |w: &str| {
            self.id(w)
                .ok_or_else(|| Error::UnknownWord(w.to_string()))
        };
        Ok(SpecialIds {
            sos: get(SOS)?,
            eos: get(EOS)?,
            mask: get(MASK)?,
            pad: get(PAD)?,
        })
    }

    pub fn encode_words(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::UnknownWord(w.to_string())))
            .collect()
    }

    /// Tokenizes `text` and wraps it as `<sos> ... <eos>`.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<TokenSequence> {
        let content = self.encode_words(text)?;
        TokenSequence::from_content(&content, &self.specials()?, max_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encodes_with_specials() {
        let v = Vocab::with_specials(["a", "red", "top"]);
        let seq = v.encode("a red top", 8).unwrap();
        assert_eq!(seq.ids(), &[0, 4, 5, 6, 1]);
        assert_eq!(seq.length(), 5);
    }

    #[test]
    fn unknown_word_is_an_error() {
        let v = Vocab::with_specials(["a"]);
        assert!(matches!(v.encode("a b", 8), Err(Error::UnknownWord(w)) if w == "b"));
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        let v = Vocab::with_specials(["x", "y"]);
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
        assert_eq!(v.word(4), Some("x"));
    }
}
