use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Maps text to token ids. Every tokenizer reserves one id as the
/// document separator.
pub trait Tokenizer: Send + Sync {
    fn vocab_size(&self) -> usize;
    fn separator(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Vec<usize>>;
    fn decode(&self, ids: &[usize]) -> Result<String>;
}

/// Raw UTF-8 bytes as ids 0..=255, separator 256.
#[derive(Clone, Copy, Debug, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const SEPARATOR: usize = 256;
    pub const VOCAB_SIZE: usize = 257;
}

impl Tokenizer for ByteTokenizer {
    fn vocab_size(&self) -> usize {
        Self::VOCAB_SIZE
    }

    fn separator(&self) -> usize {
        Self::SEPARATOR
    }

    fn encode(&self, text: &str) -> Result<Vec<usize>> {
        Ok(text.bytes().map(usize::from).collect())
    }

    fn decode(&self, ids: &[usize]) -> Result<String> {
        let bytes = ids
            .iter()
            .map(|&id| u8::try_from(id).map_err(|_| Error::Vocabulary { id, vocab: 256 }))
            .collect::<Result<Vec<u8>>>()?;
        String::from_utf8(bytes).map_err(|e| Error::data(format!("decoded bytes are not UTF-8: {e}")))
    }
}

/// Whitespace-split word vocabulary loaded from a file with one token per
/// line. `<sep>` is appended when the file lacks it; words outside the
/// vocabulary map to `<unk>` if present and are an error otherwise.
#[derive(Clone, Debug)]
pub struct VocabTokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    sep: usize,
    unk: Option<usize>,
}

impl VocabTokenizer {
    pub const SEP: &'static str = "<sep>";
    pub const UNK: &'static str = "<unk>";

    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list: Vec<String> = Vec::new();
        let mut index = HashMap::new();
        for tok in tokens {
            let tok = tok.into();
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::data(format!("invalid vocabulary entry {tok:?}")));
            }
            if index.insert(tok.clone(), list.len()).is_some() {
                return Err(Error::data(format!("duplicate vocabulary entry {tok:?}")));
            }
            list.push(tok);
        }
        if !index.contains_key(Self::SEP) {
            index.insert(Self::SEP.to_string(), list.len());
            list.push(Self::SEP.to_string());
        }
        let sep = index[Self::SEP];
        let unk = index.get(Self::UNK).copied();
        Ok(Self {
            tokens: list,
            index,
            sep,
            unk,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Serializable description of a tokenizer, stored alongside checkpoints.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenizerSpec {
    Byte,
    Vocab { tokens: Vec<String> },
}

impl TokenizerSpec {
    pub fn build(&self) -> Result<Box<dyn Tokenizer>> {
        Ok(match self {
            Self::Byte => Box::new(ByteTokenizer),
            Self::Vocab { tokens } => Box::new(VocabTokenizer::from_tokens(tokens.iter().cloned())?),
        })
    }
}

impl Tokenizer for VocabTokenizer {
    fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    fn separator(&self) -> usize {
        self.sep
    }

    fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| match self.index.get(w) {
                Some(&id) => Ok(id),
                None => self
                    .unk
                    .ok_or_else(|| Error::data(format!("word {w:?} not in vocabulary and no <unk> entry"))),
            })
            .collect()
    }

    fn decode(&self, ids: &[usize]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&id| {
                self.tokens.get(id).map(String::as_str).ok_or(Error::Vocabulary {
                    id,
                    vocab: self.tokens.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn byte_round_trip_is_lossless(s in "\\PC{0,64}") {
            let tok = ByteTokenizer;
            let ids = tok.encode(&s).unwrap();
            prop_assert!(ids.iter().all(|&i| i < ByteTokenizer::SEPARATOR));
            prop_assert_eq!(tok.decode(&ids).unwrap(), s);
        }
    }

    #[test]
    fn vocab_tokenizer_adds_separator_and_handles_unknowns() {
        let tok = VocabTokenizer::from_tokens(["the", "cat", "<unk>"]).unwrap();
        assert_eq!(tok.vocab_size(), 4);
        assert_eq!(tok.separator(), 3);
        assert_eq!(tok.encode("the dog cat").unwrap(), vec![0, 2, 1]);
        assert_eq!(tok.decode(&[0, 1]).unwrap(), "the cat");

        let strict = VocabTokenizer::from_tokens(["a"]).unwrap();
        assert!(strict.encode("b").is_err());
        assert!(VocabTokenizer::from_tokens(["a", "a"]).is_err());
    }
}
