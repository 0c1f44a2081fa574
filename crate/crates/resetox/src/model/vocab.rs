//! Whitespace-token vocabulary with reserved control ids.
//!
//! File format: UTF-8, one token per line, line number = token id. Ids 0..3
//! are reserved for pad, bos, eos and unk.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// A token surface form starting with this prefix attaches to the previous
/// word during detokenization (word-piece continuation).
pub const CONTINUATION_PREFIX: &str = "##";

#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from word surface forms; reserved tokens come
    /// first, the rest sorted and de-duplicated.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut seen: Vec<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| !RESERVED.contains(&w.as_str()))
            .collect();
        seen.sort();
        seen.dedup();
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(seen);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "empty vocabulary line".into(),
                });
            }
            if line.split_whitespace().count() != 1 {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("vocabulary entry {line:?} contains whitespace"),
                });
            }
            tokens.push(line.to_string());
        }
        if tokens.len() < RESERVED.len() {
            return Err(Error::Format(
                "vocabulary file must carry the four reserved tokens".into(),
            ));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate vocabulary entry {t:?}"),
                });
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    /// Whitespace tokenization; unknown words map to unk.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// Joins tokens with spaces, merging `##` continuations into the
    /// previous word. Control tokens other than unk are dropped.
    pub fn detokenize(&self, tokens: &[u32]) -> String {
        self.words_with_first_token(tokens)
            .into_iter()
            .map(|(w, _)| w)
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Surface words plus the index of the first token contributing to each.
    pub fn words_with_first_token(&self, tokens: &[u32]) -> Vec<(String, usize)> {
        let mut words: Vec<(String, usize)> = Vec::new();
        for (pos, &id) in tokens.iter().enumerate() {
            if id == PAD || id == BOS || id == EOS {
                continue;
            }
            let surface = self.token(id).unwrap_or(RESERVED[UNK as usize]);
            if let Some(rest) = surface.strip_prefix(CONTINUATION_PREFIX) {
                if let Some(last) = words.last_mut() {
                    last.0.push_str(rest);
                    continue;
                }
            }
            words.push((surface.to_string(), pos));
        }
        words
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_words_reserves_control_ids() {
        let v = Vocabulary::from_words(["zeta", "alpha", "zeta"]);
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<bos>"), Some(BOS));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.len(), 6);
        assert_eq!(v.token(4), Some("alpha"));
    }

    #[test]
    fn tokenize_detokenize_round_trip() {
        let v = Vocabulary::from_words(["the", "cat", "sat"]);
        let ids = v.tokenize("the cat sat");
        assert_eq!(v.detokenize(&ids), "the cat sat");
        assert_eq!(v.tokenize("the dog sat")[1], UNK);
    }

    #[test]
    fn continuation_tokens_merge_into_previous_word() {
        let v = Vocabulary::from_words(["put", "##ain", "gars"]);
        let ids = v.tokenize("gars put ##ain");
        assert_eq!(v.detokenize(&ids), "gars putain");
        let words = v.words_with_first_token(&ids);
        assert_eq!(words, vec![("gars".into(), 0), ("putain".into(), 1)]);
    }

    #[test]
    fn save_load_round_trip(){
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::from_words(["uno", "dos"]);
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded.len(), v.len());
        assert_eq!(loaded.id("dos"), v.id("dos"));
    }

    #[test]
    fn load_rejects_multiword_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, "<pad>\n<bos>\n<eos>\n<unk>\ntwo words\n").unwrap();
        let err = Vocabulary::load(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 5, .. }));
    }
}
