use std::collections::HashMap;

use candle_core::{Device, Tensor};

use crate::error::Result;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const SPECIALS: [&str; 4] = ["[PAD]", "[BOS]", "[EOS]", "[UNK]"];

/// Whitespace word-level tokenizer over a closed vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
    max_len: usize,
}

impl Tokenizer {
    /// `max_len` bounds encoded sequences including BOS and EOS.
    pub fn new(vocab: &[String], max_len: usize) -> Self {
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in vocab {
            if !words.contains(w) {
                words.push(w.clone());
            }
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self {
            words,
            index,
            max_len: max_len.max(2),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn word_id(&self, w: &str) -> u32 {
        self.index.get(w).copied().unwrap_or(UNK)
    }

    /// Word ids without BOS/EOS.
    pub fn words_to_ids(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.word_id(w)).collect()
    }

    /// `[BOS] words.. [EOS]`, words truncated to fit `max_len`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(self.words_to_ids(text).into_iter().take(self.max_len - 2));
        ids.push(EOS);
        ids
    }

    /// Drops special tokens and joins the remaining words with spaces.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i > UNK)
            .filter_map(|&i| self.words.get(i as usize).map(String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn batch(&self, texts: &[String]) -> TokenBatch {
        TokenBatch::pad(texts.iter().map(|t| self.encode(t)).collect())
    }
}

/// Right-padded id matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<Vec<u32>>,
    pub valid: Vec<Vec<bool>>,
}

impl TokenBatch {
    pub fn pad(seqs: Vec<Vec<u32>>) -> Self {
        let l = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len());
        let mut valid = Vec::with_capacity(seqs.len());
        for s in seqs {
            let mut v = vec![true; s.len()];
            v.resize(l, false);
            let mut row = s;
            row.resize(l, PAD);
            ids.push(row);
            valid.push(v);
        }
        Self { ids, valid }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.ids.first().map(Vec::len).unwrap_or(0)
    }

    pub fn tensor(&self, device: &Device) -> Result<Tensor> {
        let flat: Vec<u32> = self.ids.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, (self.len(), self.seq_len()), device)?)
    }

    /// Rows reordered by `order`.
    pub fn select(&self, order: &[usize]) -> Self {
        Self {
            ids: order.iter().map(|&i| self.ids[i].clone()).collect(),
            valid: order.iter().map(|&i| self.valid[i].clone()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::new(&["a".into(), "red".into(), "circle".into()], 5)
    }

    #[test]
    fn encode_decode() {
        let t = tok();
        assert_eq!(t.vocab_size(), 7);
        let ids = t.encode("a red circle");
        assert_eq!(ids, vec![BOS, 4, 5, 6, EOS]);
        assert_eq!(t.decode(&ids), "a red circle");
        assert_eq!(t.encode("a purple circle"), vec![BOS, 4, UNK, 6, EOS]);
        assert_eq!(t.decode(&[BOS, 4, UNK, 6, EOS, PAD]), "a circle");
    }

    #[test]
    fn truncation_keeps_eos() {
        assert_eq!(tok().encode("a a a a a a"), vec![BOS, 4, 4, 4, EOS]);
    }

    #[test]
    fn padding() {
        let b = tok().batch(&["a".into(), "a red circle".into()]);
        assert_eq!(b.ids[0], vec![BOS, 4, EOS, PAD, PAD]);
        assert_eq!(b.valid[0], vec![true, true, true, false, false]);
        assert_eq!(b.seq_len(), 5);
    }
}
