//! Tokenization, train/validation/test splits, sequence packing and the
//! scoring-subset sampler.

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// One token per byte, vocabulary of 256.
    Byte,
    /// One token per Unicode scalar, vocabulary of the sorted distinct
    /// characters of the input.
    Char,
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "byte" => Ok(Scheme::Byte),
            "char" => Ok(Scheme::Char),
            other => Err(Error::Input(format!("unknown tokenizer scheme {other:?} (byte | char)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum Tokenizer {
    Byte,
    Char { vocab: Vec<char> },
}

impl Tokenizer {
    /// Builds a tokenizer for `text`.
    pub fn fit(text: &[u8], scheme: Scheme) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::Input("cannot tokenize empty input".into()));
        }
        match scheme {
            Scheme::Byte => Ok(Tokenizer::Byte),
            Scheme::Char => {
                let s = std::str::from_utf8(text)
                    .map_err(|e| Error::Input(format!("char scheme needs UTF-8 input: {e}")))?;
                let vocab: BTreeSet<char> = s.chars().collect();
                Ok(Tokenizer::Char { vocab: vocab.into_iter().collect() })
            }
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Byte => 256,
            Tokenizer::Char { vocab } => vocab.len(),
        }
    }

    pub fn encode(&self, text: &[u8]) -> Result<Vec<u32>> {
        match self {
            Tokenizer::Byte => Ok(text.iter().map(|&b| b as u32).collect()),
            Tokenizer::Char { vocab } => {
                let s = std::str::from_utf8(text)
                    .map_err(|e| Error::Input(format!("char scheme needs UTF-8 input: {e}")))?;
                s.chars()
                    .map(|c| {
                        vocab
                            .binary_search(&c)
                            .map(|i| i as u32)
                            .map_err(|_| Error::Input(format!("character {c:?} is not in the vocabulary")))
                    })
                    .collect()
            }
        }
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<u8> {
        match self {
            Tokenizer::Byte => ids.iter().map(|&i| i as u8).collect(),
            Tokenizer::Char { vocab } => {
                ids.iter().filter_map(|&i| vocab.get(i as usize)).collect::<String>().into_bytes()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// A token stream with a tokenizer and three ordered, disjoint splits.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub tokens: Vec<u32>,
    pub tokenizer: Tokenizer,
    train_end: usize,
    val_end: usize,
}

/// Tokenizes `text` with default 98/1/1 splits.
pub fn tokenize(text: &[u8], scheme: Scheme) -> Result<Corpus> {
    let tokenizer = Tokenizer::fit(text, scheme)?;
    let tokens = tokenizer.encode(text)?;
    Corpus::new(tokens, tokenizer)
}

impl Corpus {
    pub fn new(tokens: Vec<u32>, tokenizer: Tokenizer) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Input("empty corpus".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= tokenizer.vocab_size()) {
            return Err(Error::Input(format!("token id {bad} outside the vocabulary")));
        }
        let mut c = Corpus { tokens, tokenizer, train_end: 0, val_end: 0 };
        c.set_split_fractions(0.98, 0.01)?;
        Ok(c)
    }

    /// Reads and tokenizes a text file.
    pub fn from_file(path: &Path, scheme: Scheme) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        tokenize(&bytes, scheme)
    }

    /// Tokenizes a file with an existing tokenizer (e.g. one stored in a
    /// checkpoint).
    pub fn from_file_with(path: &Path, tokenizer: &Tokenizer) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let tokens = tokenizer.encode(&bytes)?;
        Corpus::new(tokens, tokenizer.clone())
    }

    /// Sets the train and validation fractions; the test split takes the rest.
    pub fn set_split_fractions(&mut self, train: f64, validation: f64) -> Result<()> {
        if !(train > 0.0 && validation >= 0.0 && train + validation <= 1.0 + 1e-12) {
            return Err(Error::Input(format!(
                "split fractions train={train} validation={validation} are not valid"
            )));
        }
        let n = self.tokens.len();
        self.train_end = ((n as f64 * train).floor() as usize).min(n);
        self.val_end = (self.train_end + (n as f64 * validation).floor() as usize).min(n);
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size()
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => 0..self.train_end,
            Split::Validation => self.train_end..self.val_end,
            Split::Test => self.val_end..self.tokens.len(),
        }
    }

    pub fn split(&self, split: Split) -> &[u32] {
        &self.tokens[self.range(split)]
    }
}

/// Inputs and next-token targets for `batch` packed sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedBatch {
    /// Row-major `batch × seq_len`.
    pub inputs: Vec<u32>,
    /// `targets[t] = inputs[t + 1]` within each packed window.
    pub targets: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
}

impl PackedBatch {
    pub fn num_tokens(&self) -> usize {
        self.batch * self.seq_len
    }

    fn from_windows(tokens: &[u32], starts: &[usize], seq_len: usize) -> Self {
        let mut inputs = Vec::with_capacity(starts.len() * seq_len);
        let mut targets = Vec::with_capacity(starts.len() * seq_len);
        for &s in starts {
            inputs.extend_from_slice(&tokens[s..s + seq_len]);
            targets.extend_from_slice(&tokens[s + 1..s + seq_len + 1]);
        }
        PackedBatch { inputs, targets, batch: starts.len(), seq_len }
    }
}

/// Contiguous non-overlapping windows over a split, visited in a seeded
/// order that is reshuffled every epoch.
#[derive(Clone, Debug)]
pub struct Packer<'a> {
    tokens: &'a [u32],
    seq_len: usize,
    batch_size: usize,
    seed: u64,
}

impl<'a> Packer<'a> {
    pub fn new(tokens: &'a [u32], seq_len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if seq_len == 0 || batch_size == 0 {
            return Err(Error::Input("seq_len and batch_size must be positive".into()));
        }
        if tokens.len() < seq_len + 1 {
            return Err(Error::Input(format!(
                "split of {} tokens is too short for seq_len {seq_len}",
                tokens.len()
            )));
        }
        Ok(Packer { tokens, seq_len, batch_size, seed })
    }

    pub fn num_windows(&self) -> usize {
        (self.tokens.len() - 1) / self.seq_len
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.num_windows().div_ceil(self.batch_size)
    }

    /// Window start offsets in the order epoch `epoch` visits them.
    pub fn window_order(&self, epoch: u64) -> Vec<usize> {
        let mut starts: Vec<usize> = (0..self.num_windows()).map(|w| w * self.seq_len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch);
        starts.shuffle(&mut rng);
        starts
    }

    /// Batches of one epoch; the final batch may be short.
    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = PackedBatch> + 'a {
        let order = self.window_order(epoch);
        let (tokens, seq_len, bs) = (self.tokens, self.seq_len, self.batch_size);
        let n = order.len();
        (0..n.div_ceil(bs)).map(move |b| {
            let chunk = &order[b * bs..((b + 1) * bs).min(n)];
            PackedBatch::from_windows(tokens, chunk, seq_len)
        })
    }

    /// Endless stream of epochs.
    pub fn stream(&self) -> impl Iterator<Item = PackedBatch> + 'a {
        let me = self.clone();
        (0u64..).flat_map(move |e| me.epoch(e))
    }
}

/// A seeded sample of whole windows from the training split used for
/// expressive-score accumulation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScoringSubset {
    /// Window start offsets into the split, ascending.
    pub starts: Vec<usize>,
    pub seq_len: usize,
}

/// Samples `fraction` of the split's windows, chosen by `seed`.
pub fn scoring_subset(train: &[u32], fraction: f64, seq_len: usize, seed: u64) -> Result<ScoringSubset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Input(format!("scoring fraction {fraction} must lie in (0, 1]")));
    }
    let packer = Packer::new(train, seq_len, 1, seed)?;
    let n = packer.num_windows();
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut starts: Vec<usize> = (0..n).map(|w| w * seq_len).collect();
    if k < n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5c0e_5c0e);
        starts.shuffle(&mut rng);
        starts.truncate(k);
        starts.sort_unstable();
    }
    Ok(ScoringSubset { starts, seq_len })
}

impl ScoringSubset {
    pub fn num_tokens(&self) -> usize {
        self.starts.len() * self.seq_len
    }

    /// Batches in ascending window order.
    pub fn batches(&self, train: &[u32], batch_size: usize) -> Vec<PackedBatch> {
        self.starts
            .chunks(batch_size.max(1))
            .map(|c| PackedBatch::from_windows(train, c, self.seq_len))
            .collect()
    }
}

/// Non-overlapping evaluation windows of `len` tokens.
pub fn eval_windows(tokens: &[u32], len: usize) -> Vec<&[u32]> {
    if len == 0 {
        return Vec::new();
    }
    tokens.chunks_exact(len).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn byte_level_ids() {
        let c = tokenize(b"ab", Scheme::Byte).unwrap();
        assert_eq!(c.tokens, vec![97, 98]);
        assert_eq!(c.vocab_size(), 256);
    }

    #[test]
    fn char_vocab_is_sorted_unique() {
        let c = tokenize("aba".as_bytes(), Scheme::Char).unwrap();
        assert_eq!(c.tokenizer, Tokenizer::Char { vocab: vec!['a', 'b'] });
        assert_eq!(c.tokens, vec![0, 1, 0]);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(tokenize(b"", Scheme::Byte), Err(Error::Input(_))));
    }

    #[test]
    fn byte_round_trip_on_random_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bytes: Vec<u8> = (0..500).map(|_| rng.random()).collect();
        let c = tokenize(&bytes, Scheme::Byte).unwrap();
        assert_eq!(c.tokenizer.decode(&c.tokens), bytes);
    }

    #[test]
    fn splits_are_ordered_and_disjoint() {
        let c = tokenize(&[7u8; 1000], Scheme::Byte).unwrap();
        let (t, v, s) = (c.range(Split::Train), c.range(Split::Validation), c.range(Split::Test));
        assert_eq!((t.start, t.end, v.end, s.end), (0, 980, 990, 1000));
        assert_eq!(v.start, t.end);
        assert_eq!(s.start, v.end);
    }

    #[test]
    fn eleven_tokens_give_two_windows() {
        let toks: Vec<u32> = (0..11).collect();
        let p = Packer::new(&toks, 5, 4, 0).unwrap();
        assert_eq!(p.num_windows(), 2);
        let b: Vec<PackedBatch> = p.epoch(0).collect();
        assert_eq!(b.len(), 1);
        let mut rows: Vec<(Vec<u32>, Vec<u32>)> = (0..2)
            .map(|r| (b[0].inputs[r * 5..r * 5 + 5].to_vec(), b[0].targets[r * 5..r * 5 + 5].to_vec()))
            .collect();
        rows.sort();
        assert_eq!(rows[0], (vec![0, 1, 2, 3, 4], vec![1, 2, 3, 4, 5]));
        assert_eq!(rows[1], (vec![5, 6, 7, 8, 9], vec![6, 7, 8, 9, 10]));
    }

    #[test]
    fn packing_is_seed_deterministic_and_lossless() {
        let toks: Vec<u32> = (0..1003).map(|i| i % 251).collect();
        let p = Packer::new(&toks, 10, 7, 42).unwrap();
        let a: Vec<_> = p.epoch(0).collect();
        let b: Vec<_> = Packer::new(&toks, 10, 7, 42).unwrap().epoch(0).collect();
        assert_eq!(a, b);
        assert_ne!(p.window_order(0), p.window_order(1));

        // Coverage oracle: every input position of the split appears once,
        // except at most seq_len trailing tokens.
        let mut seen = vec![0usize; toks.len()];
        for s in p.window_order(0) {
            for c in &mut seen[s..s + 10] {
                *c += 1;
            }
        }
        let covered = seen.iter().filter(|&&c| c == 1).count();
        assert!(seen.iter().all(|&c| c <= 1));
        assert!(toks.len() - covered <= 10);
        assert_eq!(seen.iter().position(|&c| c == 0).unwrap(), covered);
    }

    #[test]
    fn targets_shift_inputs_by_one() {
        let toks: Vec<u32> = (0..200).map(|i| (i * 7 % 13) as u32).collect();
        for b in Packer::new(&toks, 9, 3, 5).unwrap().epoch(0) {
            for r in 0..b.batch {
                let i = &b.inputs[r * 9..(r + 1) * 9];
                let t = &b.targets[r * 9..(r + 1) * 9];
                assert_eq!(&i[1..], &t[..8]);
            }
        }
    }

    #[test]
    fn short_split_rejected() {
        assert!(matches!(Packer::new(&[1, 2, 3], 3, 1, 0), Err(Error::Input(_))));
    }

    #[test]
    fn scoring_subset_fractions() {
        let toks = vec![0u32; 1_000_001];
        let full = scoring_subset(&toks, 1.0, 100, 3).unwrap();
        assert_eq!(full.starts.len(), 10_000);
        let five = scoring_subset(&toks, 0.05, 100, 3).unwrap();
        assert!((five.num_tokens() as i64 - 50_000).abs() <= 100);
        let other = scoring_subset(&toks, 0.05, 100, 4).unwrap();
        assert_eq!(five.num_tokens(), other.num_tokens());
        assert_ne!(five.starts, other.starts);
        assert_eq!(five, scoring_subset(&toks, 0.05, 100, 3).unwrap());
        assert!(matches!(scoring_subset(&toks, 0.0, 100, 3), Err(Error::Input(_))));
        assert!(matches!(scoring_subset(&toks, 1.5, 100, 3), Err(Error::Input(_))));
    }
}
