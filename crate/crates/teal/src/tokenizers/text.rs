//! Whitespace word-level text tokenizer.
//!
//! Ids 0..3 are reserved: pad, bos, eos, unk. Real words are assigned ids in
//! first-occurrence order over the fit corpus, starting at 4. The grammar
//! this project feeds it is closed, so word-level is lossless; anything
//! outside the fit corpus encodes as `unk`.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

/// Number of reserved ids below the first real word.
pub const N_SPECIALS: u32 = 4;

#[derive(Debug, Clone)]
pub struct TextVocab {
    word_to_id: HashMap<String, u32>,
    words: Vec<String>, // index i ↔ id N_SPECIALS + i
}

impl TextVocab {
    /// Build from a corpus: whitespace-split every line, keep first-occurrence order.
    pub fn fit<I, T>(corpus: I) -> Self
    where
        I: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        let mut word_to_id = HashMap::new();
        let mut words = Vec::new();
        for line in corpus {
            for w in line.as_ref().split_whitespace() {
                if !word_to_id.contains_key(w) {
                    let id = N_SPECIALS + words.len() as u32;
                    word_to_id.insert(w.to_string(), id);
                    words.push(w.to_string());
                }
            }
        }
        TextVocab { word_to_id, words }
    }

    /// Rebuild from a persisted ordered word list.
    pub fn from_words(words: Vec<String>) -> Self {
        let word_to_id = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), N_SPECIALS + i as u32))
            .collect();
        TextVocab { word_to_id, words }
    }

    /// Total id count including the four specials.
    pub fn size(&self) -> usize {
        N_SPECIALS as usize + self.words.len()
    }

    /// Ordered non-special words (for persistence).
    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word_id(&self, word: &str) -> Option<u32> {
        self.word_to_id.get(word).copied()
    }

    /// Word ids only — no bos/eos wrapper. Out-of-vocab words become `unk`.
    pub fn encode_words(&self, s: &str) -> Vec<u32> {
        s.split_whitespace()
            .map(|w| self.word_id(w).unwrap_or(UNK))
            .collect()
    }

    /// `[bos, words..., eos]`.
    pub fn encode(&self, s: &str) -> Vec<u32> {
        let mut out = vec![BOS];
        out.extend(self.encode_words(s));
        out.push(EOS);
        out
    }

    /// Words joined by single spaces. pad/bos/eos are skipped, `unk` renders
    /// as `<unk>`, ids beyond the vocabulary error.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut parts = Vec::new();
        for &id in ids {
            match id {
                PAD | BOS | EOS => {}
                UNK => parts.push("<unk>"),
                _ => {
                    let idx = (id - N_SPECIALS) as usize;
                    let w = self.words.get(idx).ok_or(Error::IdRange {
                        what: "text id",
                        id: id as usize,
                        lo: 0,
                        hi: self.size(),
                    })?;
                    parts.push(w);
                }
            }
        }
        Ok(parts.join(" "))
    }
}
