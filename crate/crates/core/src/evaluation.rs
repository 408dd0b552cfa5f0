//! Held-out perplexity and last-token prediction accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Anything that maps a `batch × seq` token matrix to per-position logits.
pub trait LanguageModel<T: Scalar> {
    fn vocab_size(&self) -> usize;
    fn logits(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<Tensor<T>>;
}

impl<T: Scalar> LanguageModel<T> for Transformer<T> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn logits(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<Tensor<T>> {
        Transformer::logits(self, tokens, batch, seq)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Windows per forward pass.
    pub batch_size: usize,
    /// Evaluate only the first `n` windows of the split.
    pub max_windows: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { batch_size: 16, max_windows: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub tokens_evaluated: usize,
    pub perplexity: f64,
    pub last_token_accuracy: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "dataset,tokens_evaluated,perplexity,last_token_accuracy";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.dataset, self.tokens_evaluated, self.perplexity, self.last_token_accuracy)
    }
}

fn log_softmax_at<T: Scalar>(row: &[T], id: usize) -> f64 {
    let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|v| (v.as_f64() - m).exp()).sum();
    row[id].as_f64() - m - s.ln()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Sum of next-token negative log-likelihoods and the token count over
/// non-overlapping windows of `seq_len` inputs.
pub fn total_nll<T: Scalar, M: LanguageModel<T>>(
    model: &M,
    tokens: &[u32],
    seq_len: usize,
    opts: EvalOptions,
) -> Result<(f64, usize)> {
    if seq_len == 0 || tokens.len() < seq_len + 1 {
        return Err(Error::Input(format!(
            "evaluation split of {} tokens is too short for seq_len {seq_len}",
            tokens.len()
        )));
    }
    let mut windows = (tokens.len() - 1) / seq_len;
    if let Some(cap) = opts.max_windows {
        windows = windows.min(cap.max(1));
    }
    let v = model.vocab_size();
    let bs = opts.batch_size.max(1);
    let mut nll = 0.0;
    let mut count = 0;
    let mut start = 0;
    while start < windows {
        let end = (start + bs).min(windows);
        let batch = end - start;
        let inputs: Vec<u32> = (start..end).flat_map(|w| tokens[w * seq_len..(w + 1) * seq_len].iter().copied()).collect();
        let logits = model.logits(&inputs, batch, seq_len)?;
        for (b, w) in (start..end).enumerate() {
            for t in 0..seq_len {
                let target = tokens[w * seq_len + t + 1] as usize;
                let row = &logits.data()[(b * seq_len + t) * v..(b * seq_len + t + 1) * v];
                nll -= log_softmax_at(row, target);
                count += 1;
            }
        }
        start = end;
    }
    Ok((nll, count))
}

/// `exp` of the mean next-token negative log-likelihood.
pub fn perplexity<T: Scalar, M: LanguageModel<T>>(model: &M, tokens: &[u32], seq_len: usize, opts: EvalOptions) -> Result<f64> {
    let (nll, n) = total_nll(model, tokens, seq_len, opts)?;
    Ok((nll / n as f64).exp())
}

/// Fraction of sequences whose final token is the argmax prediction after
/// the preceding `context_len` tokens.
pub fn last_token_accuracy<T: Scalar, M: LanguageModel<T>>(
    model: &M,
    sequences: &[&[u32]],
    context_len: usize,
    batch_size: usize,
) -> Result<f64> {
    if sequences.is_empty() {
        return Err(Error::Input("no sequences to evaluate".into()));
    }
    if context_len == 0 {
        return Err(Error::Input("context_len must be positive".into()));
    }
    if let Some(s) = sequences.iter().find(|s| s.len() < context_len + 1) {
        return Err(Error::Input(format!(
            "sequence of length {} is shorter than context_len + 1 = {}",
            s.len(),
            context_len + 1
        )));
    }
    let v = model.vocab_size();
    let mut correct = 0usize;
    for chunk in sequences.chunks(batch_size.max(1)) {
        let inputs: Vec<u32> = chunk
            .iter()
            .flat_map(|s| s[s.len() - 1 - context_len..s.len() - 1].iter().copied())
            .collect();
        let logits = model.logits(&inputs, chunk.len(), context_len)?;
        for (b, s) in chunk.iter().enumerate() {
            let r = b * context_len + context_len - 1;
            let row = &logits.data()[r * v..(r + 1) * v];
            if argmax(row) == *s.last().expect("non-empty") as usize {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / sequences.len() as f64)
}

/// Perplexity over `seq_len` windows plus last-token accuracy over
/// non-overlapping `seq_len + 1` sequences of the same split.
pub fn evaluate<T: Scalar, M: LanguageModel<T>>(
    model: &M,
    tokens: &[u32],
    seq_len: usize,
    opts: EvalOptions,
    dataset: &str,
) -> Result<EvalReport> {
    let (nll, n) = total_nll(model, tokens, seq_len, opts)?;
    let mut seqs: Vec<&[u32]> = tokens.chunks_exact(seq_len + 1).collect();
    if let Some(cap) = opts.max_windows {
        seqs.truncate(cap.max(1));
    }
    let acc = last_token_accuracy(model, &seqs, seq_len, opts.batch_size)?;
    Ok(EvalReport {
        dataset: dataset.to_string(),
        tokens_evaluated: n,
        perplexity: (nll / n as f64).exp(),
        last_token_accuracy: acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Uniform(usize);
    impl LanguageModel<f64> for Uniform {
        fn vocab_size(&self) -> usize {
            self.0
        }
        fn logits(&self, tokens: &[u32], _: usize, _: usize) -> Result<Tensor<f64>> {
            Ok(Tensor::full(&[tokens.len(), self.0], 0.25))
        }
    }

    /// Puts all mass on `(token + 1) % vocab`, which is exactly right for a
    /// counting sequence.
    struct Successor(usize);
    impl LanguageModel<f64> for Successor {
        fn vocab_size(&self) -> usize {
            self.0
        }
        fn logits(&self, tokens: &[u32], _: usize, _: usize) -> Result<Tensor<f64>> {
            let mut t = Tensor::full(&[tokens.len(), self.0], -1e4);
            for (r, &tok) in tokens.iter().enumerate() {
                t.data_mut()[r * self.0 + (tok as usize + 1) % self.0] = 0.0;
            }
            Ok(t)
        }
    }

    fn counting(n: usize, v: usize) -> Vec<u32> {
        (0..n).map(|i| (i % v) as u32).collect()
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let toks = counting(1000, 256);
        let p = perplexity(&Uniform(256), &toks, 16, EvalOptions::default()).unwrap();
        assert!((p - 256.0).abs() < 1e-3);
    }

    #[test]
    fn perfect_model_has_unit_perplexity_and_full_accuracy() {
        let toks = counting(500, 7);
        let p = perplexity(&Successor(7), &toks, 10, EvalOptions::default()).unwrap();
        assert!((p - 1.0).abs() < 1e-9);
        let seqs: Vec<&[u32]> = toks.chunks_exact(11).collect();
        assert_eq!(last_token_accuracy(&Successor(7), &seqs, 10, 4).unwrap(), 1.0);
    }

    #[test]
    fn constant_logits_pick_token_zero() {
        let toks: Vec<u32> = (0..300).map(|i| 1 + (i % 5) as u32).collect();
        let seqs: Vec<&[u32]> = toks.chunks_exact(6).collect();
        assert_eq!(last_token_accuracy(&Uniform(8), &seqs, 5, 3).unwrap(), 0.0);
    }

    #[test]
    fn short_inputs_rejected() {
        assert!(matches!(perplexity(&Uniform(4), &[1, 2], 4, EvalOptions::default()), Err(Error::Input(_))));
        let s: &[u32] = &[1, 2];
        assert!(matches!(last_token_accuracy(&Uniform(4), &[s], 2, 1), Err(Error::Input(_))));
    }

    fn tiny_model() -> Transformer<f64> {
        Transformer::init(ModelConfig::uniform(2, 2, 4, 8, 16, 13, 8), 21).unwrap()
    }

    fn random_tokens(n: usize, seed: u64) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0..13)).collect()
    }

    #[test]
    fn perplexity_matches_per_token_recomputation() {
        let m = tiny_model();
        let toks = random_tokens(70, 3);
        let got = perplexity(&m, &toks, 8, EvalOptions { batch_size: 3, max_windows: None }).unwrap();
        // one window at a time, one softmax at a time
        let mut nll = 0.0;
        let mut n = 0;
        for w in 0..(toks.len() - 1) / 8 {
            let logits = m.logits(&toks[w * 8..w * 8 + 8], 1, 8).unwrap();
            for t in 0..8 {
                let row = logits.row(t);
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                nll -= (row[toks[w * 8 + t + 1] as usize].exp() / z).ln();
                n += 1;
            }
        }
        let want = (nll / n as f64).exp();
        assert!((got - want).abs() / want < 1e-4);
    }

    #[test]
    fn perplexity_invariant_to_batching() {
        let m = tiny_model();
        let toks = random_tokens(90, 4);
        let a = perplexity(&m, &toks, 8, EvalOptions { batch_size: 1, max_windows: None }).unwrap();
        let b = perplexity(&m, &toks, 8, EvalOptions { batch_size: 4, max_windows: None }).unwrap();
        assert!((a - b).abs() / a < 1e-12);
    }

    #[test]
    fn accuracy_matches_manual_argmax() {
        let m = tiny_model();
        let toks = random_tokens(20 * 6, 5);
        let seqs: Vec<&[u32]> = toks.chunks_exact(6).collect();
        let mut hits = 0;
        for s in &seqs {
            let logits = m.logits(&s[..5], 1, 5).unwrap();
            let row = logits.row(4);
            let mut best = 0;
            for i in 0..row.len() {
                if row[i] > row[best] {
                    best = i;
                }
            }
            hits += (best == s[5] as usize) as usize;
        }
        let got = last_token_accuracy(&m, &seqs, 5, 7).unwrap();
        assert_eq!(got, hits as f64 / 20.0);
    }

    struct Shifted<'a>(&'a Transformer<f64>, f64);
    impl LanguageModel<f64> for Shifted<'_> {
        fn vocab_size(&self) -> usize {
            self.0.config.vocab_size
        }
        fn logits(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<Tensor<f64>> {
            Ok(self.0.logits(tokens, batch, seq)?.map(|v| v + self.1))
        }
    }

    #[test]
    fn metrics_ignore_constant_logit_shift() {
        let m = tiny_model();
        let toks = random_tokens(120, 6);
        let opts = EvalOptions::default();
        let a = evaluate(&m, &toks, 7, opts, "x").unwrap();
        let b = evaluate(&Shifted(&m, 3.5), &toks, 7, opts, "x").unwrap();
        assert!((a.perplexity - b.perplexity).abs() / a.perplexity < 1e-9);
        assert_eq!(a.last_token_accuracy, b.last_token_accuracy);
        assert!(a.perplexity >= 1.0);
    }
}
