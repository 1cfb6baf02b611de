//! Word-level tokenizer over the caption grammar.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const START_ID: u32 = 1;
pub const END_ID: u32 = 2;
const FIRST_WORD_ID: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
    l_max: usize,
}

/// A tokenized text: fixed-length id buffer plus the end-token position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub end_index: usize,
}

impl Tokenizer {
    /// Build from a word list; duplicates collapse, order is sorted so the
    /// same vocabulary always yields the same ids.
    pub fn new<I, S>(words: I, l_max: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut index = BTreeMap::new();
        for w in words {
            let w = w.as_ref();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Tokenize(format!(
                    "vocabulary word {w:?} is empty or contains whitespace"
                )));
            }
            index.entry(w.to_string()).or_insert(0);
        }
        let mut sorted: Vec<String> = index.keys().cloned().collect();
        sorted.sort();
        for (i, w) in sorted.iter().enumerate() {
            index.insert(w.clone(), FIRST_WORD_ID + i as u32);
        }
        if l_max < 2 {
            return Err(Error::Config(
                "l_max must fit at least start and end tokens".into(),
            ));
        }
        Ok(Self {
            words: sorted,
            index,
            l_max,
        })
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    /// Total id count including the three specials.
    pub fn vocab_size(&self) -> usize {
        self.words.len() + FIRST_WORD_ID as usize
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id_of(&self, word: &str) -> Result<u32> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Tokenize(format!("unknown word {word:?}")))
    }

    /// `[start] word ids… [end]` padded to `l_max`.
    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        let mut ids = Vec::with_capacity(self.l_max);
        ids.push(START_ID);
        for word in text.split_whitespace() {
            ids.push(self.id_of(word)?);
        }
        ids.push(END_ID);
        if ids.len() > self.l_max {
            return Err(Error::Tokenize(format!(
                "{text:?} needs {} tokens, limit is {}",
                ids.len(),
                self.l_max
            )));
        }
        let end_index = ids.len() - 1;
        ids.resize(self.l_max, PAD_ID);
        Ok(TokenSeq { ids, end_index })
    }

    /// Word count of `text` once tokenized (no specials).
    pub fn word_count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }

    pub fn detokenize(&self, seq: &TokenSeq) -> Result<String> {
        let mut words = Vec::new();
        for (pos, &id) in seq.ids.iter().enumerate() {
            match id {
                START_ID if pos == 0 => {}
                END_ID => break,
                PAD_ID | START_ID => {
                    return Err(Error::Tokenize(format!(
                        "unexpected special id {id} at position {pos}"
                    )))
                }
                _ => {
                    let idx = (id - FIRST_WORD_ID) as usize;
                    let word = self.words.get(idx).ok_or_else(|| {
                        Error::Tokenize(format!("id {id} outside vocabulary"))
                    })?;
                    words.push(word.as_str());
                }
            }
        }
        Ok(words.join(" "))
    }
}
