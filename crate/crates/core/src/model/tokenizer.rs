//! Fallback tokenizers: raw bytes, or whitespace-split words against a vocabulary list.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Tokenizer {
    /// One token per UTF-8 byte; needs a vocabulary of at least 256.
    Byte,
    /// Whitespace-separated words; unknown words map to id 0.
    Whitespace {
        words: Vec<String>,
        index: HashMap<String, u32>,
    },
}

impl Tokenizer {
    pub fn whitespace(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Tokenizer::Whitespace { words, index }
    }

    /// Vocabulary file: one word per line, line number = id.
    pub fn whitespace_from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::whitespace(text.lines().map(str::to_owned).collect()))
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Byte => 256,
            Tokenizer::Whitespace { words, .. } => words.len(),
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        match self {
            Tokenizer::Byte => text.bytes().map(u32::from).collect(),
            Tokenizer::Whitespace { index, .. } => text
                .split_whitespace()
                .map(|w| index.get(w).copied().unwrap_or(0))
                .collect(),
        }
    }

    pub fn decode(&self, tokens: &[u32]) -> String {
        match self {
            Tokenizer::Byte => {
                let bytes: Vec<u8> = tokens.iter().map(|&t| t.min(255) as u8).collect();
                String::from_utf8_lossy(&bytes).into_owned()
            }
            Tokenizer::Whitespace { words, .. } => tokens
                .iter()
                .map(|&t| words.get(t as usize).map_or("<unk>", String::as_str))
                .collect::<Vec<_>>()
                .join(" "),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_round_trip() {
        let t = Tokenizer::Byte;
        let ids = t.encode("hi é");
        assert_eq!(ids.len(), 5);
        assert_eq!(t.decode(&ids), "hi é");
    }

    #[test]
    fn whitespace_maps_unknown_to_zero() {
        let t = Tokenizer::whitespace(vec!["<unk>".into(), "the".into(), "cat".into()]);
        assert_eq!(t.encode("the  cat\tsat"), vec![1, 2, 0]);
        assert_eq!(t.decode(&[2, 1]), "cat the");
        assert_eq!(t.vocab_size(), 3);
    }
}
