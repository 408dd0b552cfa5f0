//! GPT-2 style decoder-only transformer with multiplicative probe masks.
//!
//! Every attention head, FFN neuron and hidden dimension has a mask value.
//! Head and neuron masks scale their unit's output. The hidden-dimension
//! mask is shared by all layers: it weights the statistics of every layer
//! norm and gates the layer-norm outputs, which are the only readers of the
//! residual stream. With 0/1 masks the masked model computes exactly what
//! the physically pruned model computes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
}

/// Architecture hyperparameters. Head and FFN widths are stored per layer so
/// that pruned models with uneven shapes are representable.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub head_dim: usize,
    pub heads: Vec<usize>,
    pub ffn: Vec<usize>,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_true")]
    pub tie_embeddings: bool,
    #[serde(default)]
    pub activation: Activation,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// All layers share the same head count and FFN width.
    pub fn uniform(
        layers: usize,
        heads: usize,
        head_dim: usize,
        hidden_dim: usize,
        ffn: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Self {
        ModelConfig {
            hidden_dim,
            head_dim,
            heads: vec![heads; layers],
            ffn: vec![ffn; layers],
            vocab_size,
            max_seq_len,
            tie_embeddings: true,
            activation: Activation::Gelu,
        }
    }

    /// Small configuration used by tests and sparsity checks.
    pub fn tiny_reference() -> Self {
        ModelConfig::uniform(4, 4, 16, 64, 256, 64, 64)
    }

    pub fn num_layers(&self) -> usize {
        self.heads.len()
    }

    /// True when every layer has the same head count and FFN width.
    pub fn is_uniform(&self) -> bool {
        self.heads.windows(2).all(|w| w[0] == w[1]) && self.ffn.windows(2).all(|w| w[0] == w[1])
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.head_dim == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Validation(format!(
                "hidden_dim, head_dim, vocab_size and max_seq_len must be positive: {self:?}"
            )));
        }
        if self.heads.len() != self.ffn.len() {
            return Err(Error::Validation(format!(
                "{} head counts but {} ffn widths",
                self.heads.len(),
                self.ffn.len()
            )));
        }
        Ok(())
    }
}

/// Exact number of trainable scalars, respecting embedding tying.
pub fn count_parameters(config: &ModelConfig) -> usize {
    let d = config.hidden_dim;
    let mut n = config.vocab_size * d + config.max_seq_len * d;
    for (&a, &i) in config.heads.iter().zip(&config.ffn) {
        n += 4 * d * a * config.head_dim + 2 * d * i + 4 * d;
    }
    n += 2 * d;
    if !config.tie_embeddings {
        n += config.vocab_size * d;
    }
    n
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    /// `[d, heads·head_dim]`
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    /// `[heads·head_dim, d]`
    pub w_o: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    /// `[d, ffn]`
    pub ffn_in: Tensor<T>,
    /// `[ffn, d]`
    pub ffn_out: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters<T> {
    /// `[vocab, d]`, also the output projection when embeddings are tied.
    pub tok_emb: Tensor<T>,
    /// `[max_seq_len, d]`
    pub pos_emb: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_gain: Tensor<T>,
    pub lnf_bias: Tensor<T>,
    /// `[vocab, d]`, present only for untied embeddings.
    pub lm_head: Option<Tensor<T>>,
}

const LAYER_FIELDS: [&str; 10] =
    ["ln1.gain", "ln1.bias", "attn.q", "attn.k", "attn.v", "attn.o", "ln2.gain", "ln2.bias", "ffn.in", "ffn.out"];

impl<T: Scalar> LayerParams<T> {
    fn tensors(&self) -> [&Tensor<T>; 10] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.ffn_in,
            &self.ffn_out,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 10] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.ffn_in,
            &mut self.ffn_out,
        ]
    }
}

/// Expected `(name, shape)` of every stored tensor, in storage order.
pub fn tensor_manifest(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.hidden_dim;
    let mut out = vec![
        ("tok_emb".to_string(), vec![config.vocab_size, d]),
        ("pos_emb".to_string(), vec![config.max_seq_len, d]),
    ];
    for (l, (&a, &i)) in config.heads.iter().zip(&config.ffn).enumerate() {
        let w = a * config.head_dim;
        let shapes = [vec![d], vec![d], vec![d, w], vec![d, w], vec![d, w], vec![w, d], vec![d], vec![d], vec![d, i], vec![i, d]];
        for (f, s) in LAYER_FIELDS.iter().zip(shapes) {
            out.push((format!("layers.{l}.{f}"), s));
        }
    }
    out.push(("lnf.gain".to_string(), vec![d]));
    out.push(("lnf.bias".to_string(), vec![d]));
    if !config.tie_embeddings {
        out.push(("lm_head".to_string(), vec![config.vocab_size, d]));
    }
    out
}

impl<T: Scalar> ModelParameters<T> {
    /// GPT-2 style initialization: N(0, 0.02) weights, residual output
    /// projections scaled by 1/√(2L), unit gains and zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let std = 0.02;
        let resid_std = std / ((2 * config.num_layers().max(1)) as f64).sqrt();
        let mut normal = |shape: &[usize], s: f64| {
            if shape.iter().product::<usize>() == 0 {
                Tensor::new_allow_empty(shape.to_vec(), Vec::new())
            } else {
                Tensor::randn(shape, s, &mut rng)
            }
        };
        let tok_emb = normal(&[config.vocab_size, d], std);
        let pos_emb = normal(&[config.max_seq_len, d], std);
        let mut layers = Vec::with_capacity(config.num_layers());
        for (&a, &i) in config.heads.iter().zip(&config.ffn) {
            let w = a * config.head_dim;
            layers.push(LayerParams {
                ln1_gain: Tensor::full(&[d], T::one()),
                ln1_bias: Tensor::zeros(&[d]),
                w_q: normal(&[d, w], std),
                w_k: normal(&[d, w], std),
                w_v: normal(&[d, w], std),
                w_o: normal(&[w, d], resid_std),
                ln2_gain: Tensor::full(&[d], T::one()),
                ln2_bias: Tensor::zeros(&[d]),
                ffn_in: normal(&[d, i], std),
                ffn_out: normal(&[i, d], resid_std),
            });
        }
        let lm_head = (!config.tie_embeddings).then(|| normal(&[config.vocab_size, d], std));
        Ok(ModelParameters {
            tok_emb,
            pos_emb,
            layers,
            lnf_gain: Tensor::full(&[d], T::one()),
            lnf_bias: Tensor::zeros(&[d]),
            lm_head,
        })
    }

    /// Every stored tensor with its name, in storage order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (f, t) in LAYER_FIELDS.iter().zip(layer.tensors()) {
                out.push((format!("layers.{l}.{f}"), t));
            }
        }
        out.push(("lnf.gain".to_string(), &self.lnf_gain));
        out.push(("lnf.bias".to_string(), &self.lnf_bias));
        if let Some(h) = &self.lm_head {
            out.push(("lm_head".to_string(), h));
        }
        out
    }

    /// Mutable counterpart of [`ModelParameters::named_tensors`] (same order).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        if let Some(h) = &mut self.lm_head {
            out.push(h);
        }
        out
    }

    /// Checks that every tensor matches the extents implied by `config`.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let want = tensor_manifest(config);
        let have = self.named_tensors();
        if want.len() != have.len() {
            return Err(Error::Validation(format!(
                "config implies {} tensors, parameters hold {}",
                want.len(),
                have.len()
            )));
        }
        for ((wn, ws), (hn, ht)) in want.iter().zip(&have) {
            if wn != hn || ws.as_slice() != ht.shape() {
                return Err(Error::Validation(format!(
                    "tensor {hn} has shape {:?}, config expects {wn} {ws:?}",
                    ht.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// SHA-256 over names, shapes and little-endian f32 values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for &e in t.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParameters<U> {
        ModelParameters {
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gain: l.ln1_gain.cast(),
                    ln1_bias: l.ln1_bias.cast(),
                    w_q: l.w_q.cast(),
                    w_k: l.w_k.cast(),
                    w_v: l.w_v.cast(),
                    w_o: l.w_o.cast(),
                    ln2_gain: l.ln2_gain.cast(),
                    ln2_bias: l.ln2_bias.cast(),
                    ffn_in: l.ffn_in.cast(),
                    ffn_out: l.ffn_out.cast(),
                })
                .collect(),
            lnf_gain: self.lnf_gain.cast(),
            lnf_bias: self.lnf_bias.cast(),
            lm_head: self.lm_head.as_ref().map(|t| t.cast()),
        }
    }

    /// Places every tensor on `tape` as a leaf.
    pub fn to_tape(&self, tape: &mut Tape<T>, requires_grad: bool) -> ParamVars {
        let mut leaf = |t: &Tensor<T>| tape.leaf(t.clone(), requires_grad);
        ParamVars {
            tok_emb: leaf(&self.tok_emb),
            pos_emb: leaf(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    ln1_gain: leaf(&l.ln1_gain),
                    ln1_bias: leaf(&l.ln1_bias),
                    w_q: leaf(&l.w_q),
                    w_k: leaf(&l.w_k),
                    w_v: leaf(&l.w_v),
                    w_o: leaf(&l.w_o),
                    ln2_gain: leaf(&l.ln2_gain),
                    ln2_bias: leaf(&l.ln2_bias),
                    ffn_in: leaf(&l.ffn_in),
                    ffn_out: leaf(&l.ffn_out),
                })
                .collect(),
            lnf_gain: leaf(&self.lnf_gain),
            lnf_bias: leaf(&self.lnf_bias),
            lm_head: self.lm_head.as_ref().map(leaf),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub ffn_in: Var,
    pub ffn_out: Var,
}

impl LayerVars {
    fn all(&self) -> [Var; 10] {
        [
            self.ln1_gain,
            self.ln1_bias,
            self.w_q,
            self.w_k,
            self.w_v,
            self.w_o,
            self.ln2_gain,
            self.ln2_bias,
            self.ffn_in,
            self.ffn_out,
        ]
    }
}

/// Tape handles for [`ModelParameters`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
    pub lnf_gain: Var,
    pub lnf_bias: Var,
    pub lm_head: Option<Var>,
}

impl ParamVars {
    /// Handles in the same order as [`ModelParameters::named_tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.extend(l.all());
        }
        out.push(self.lnf_gain);
        out.push(self.lnf_bias);
        out.extend(self.lm_head);
        out
    }
}

/// Mask values: one per head and neuron of every layer, one per hidden
/// dimension shared across layers.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet<T> {
    pub heads: Vec<Vec<T>>,
    pub neurons: Vec<Vec<T>>,
    pub hidden: Vec<T>,
}

impl<T: Scalar> MaskSet<T> {
    pub fn ones(config: &ModelConfig) -> Self {
        MaskSet {
            heads: config.heads.iter().map(|&a| vec![T::one(); a]).collect(),
            neurons: config.ffn.iter().map(|&i| vec![T::one(); i]).collect(),
            hidden: vec![T::one(); config.hidden_dim],
        }
    }

    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let heads: Vec<usize> = self.heads.iter().map(Vec::len).collect();
        let ffn: Vec<usize> = self.neurons.iter().map(Vec::len).collect();
        if heads != config.heads || ffn != config.ffn || self.hidden.len() != config.hidden_dim {
            return Err(Error::Validation("mask extents do not match the model config".into()));
        }
        Ok(())
    }

    pub fn to_tape(&self, tape: &mut Tape<T>, requires_grad: bool) -> MaskVars {
        let vec_leaf = |tape: &mut Tape<T>, v: &[T]| {
            if v.is_empty() {
                None
            } else {
                Some(tape.leaf(Tensor::new_allow_empty(vec![v.len()], v.to_vec()), requires_grad))
            }
        };
        MaskVars {
            heads: self.heads.iter().map(|h| vec_leaf(tape, h)).collect(),
            neurons: self.neurons.iter().map(|n| vec_leaf(tape, n)).collect(),
            hidden: vec_leaf(tape, &self.hidden).expect("hidden_dim is positive"),
        }
    }
}

/// Tape handles for a [`MaskSet`]; `None` for layers without units.
#[derive(Clone, Debug)]
pub struct MaskVars {
    pub heads: Vec<Option<Var>>,
    pub neurons: Vec<Option<Var>>,
    pub hidden: Var,
}

/// Pre-LN with affine, gated by the hidden mask when present.
fn norm<T: Scalar>(tape: &mut Tape<T>, x: Var, gain: Var, bias: Var, hidden: Option<Var>) -> Result<Var> {
    let z = tape.layer_norm(x, hidden)?;
    let z = tape.mul_row(z, gain)?;
    let z = tape.add_row(z, bias)?;
    match hidden {
        Some(mu) => tape.mul_row(z, mu),
        None => Ok(z),
    }
}

/// Pre-residual output of layer `l`'s attention block, or `None` when the
/// layer has no heads.
#[allow(clippy::too_many_arguments)]
pub fn attention_block<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    l: usize,
    p: &LayerVars,
    masks: Option<&MaskVars>,
    x: Var,
    batch: usize,
    seq: usize,
) -> Result<Option<Var>> {
    let heads = config.heads[l];
    if heads == 0 {
        return Ok(None);
    }
    let hidden = masks.map(|m| m.hidden);
    let a = norm(tape, x, p.ln1_gain, p.ln1_bias, hidden)?;
    let q = tape.matmul(a, p.w_q)?;
    let k = tape.matmul(a, p.w_k)?;
    let v = tape.matmul(a, p.w_v)?;
    let mut o = tape.causal_attention(q, k, v, batch, seq, heads)?;
    if let Some(xi) = masks.and_then(|m| m.heads[l]) {
        let row = tape.repeat_interleave(xi, config.head_dim)?;
        o = tape.mul_row(o, row)?;
    }
    Ok(Some(tape.matmul(o, p.w_o)?))
}

/// Pre-residual output of layer `l`'s FFN block, or `None` when the layer
/// has no neurons.
pub fn ffn_block<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    l: usize,
    p: &LayerVars,
    masks: Option<&MaskVars>,
    x: Var,
) -> Result<Option<Var>> {
    if config.ffn[l] == 0 {
        return Ok(None);
    }
    let hidden = masks.map(|m| m.hidden);
    let a = norm(tape, x, p.ln2_gain, p.ln2_bias, hidden)?;
    let h = tape.matmul(a, p.ffn_in)?;
    let mut h = tape.gelu(h)?;
    if let Some(nu) = masks.and_then(|m| m.neurons[l]) {
        h = tape.mul_row(h, nu)?;
    }
    Ok(Some(tape.matmul(h, p.ffn_out)?))
}

/// Residual stream after embeddings, before any block.
pub fn embed<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    p: &ParamVars,
    tokens: &[u32],
    batch: usize,
    seq: usize,
) -> Result<Var> {
    if tokens.len() != batch * seq || batch == 0 || seq == 0 {
        return Err(Error::Input(format!(
            "{} tokens do not form a {batch}×{seq} batch",
            tokens.len()
        )));
    }
    if seq > config.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {seq} exceeds max_seq_len {}",
            config.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} out of range for vocabulary of {}",
            config.vocab_size
        )));
    }
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let te = tape.embedding(p.tok_emb, &ids)?;
    let pe = tape.embedding(p.pos_emb, &positions)?;
    tape.add(te, pe)
}

/// Logits `[batch·seq, vocab]` for a row-major `batch × seq` token matrix.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    p: &ParamVars,
    masks: Option<&MaskVars>,
    tokens: &[u32],
    batch: usize,
    seq: usize,
) -> Result<Var> {
    let mut x = embed(tape, config, p, tokens, batch, seq)?;
    for (l, lp) in p.layers.iter().enumerate() {
        if let Some(o) = attention_block(tape, config, l, lp, masks, x, batch, seq)? {
            x = tape.add(x, o)?;
        }
        if let Some(o) = ffn_block(tape, config, l, lp, masks, x)? {
            x = tape.add(x, o)?;
        }
    }
    let h = norm(tape, x, p.lnf_gain, p.lnf_bias, masks.map(|m| m.hidden))?;
    tape.matmul_bt(h, p.lm_head.unwrap_or(p.tok_emb))
}

/// A configuration together with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer<T> {
    pub config: ModelConfig,
    pub params: ModelParameters<T>,
}

impl<T: Scalar> Transformer<T> {
    pub fn new(config: ModelConfig, params: ModelParameters<T>) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(Transformer { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParameters::init(&config, seed)?;
        Ok(Transformer { config, params })
    }

    pub fn num_parameters(&self) -> usize {
        count_parameters(&self.config)
    }

    /// Forward pass without gradient tracking.
    pub fn logits(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<Tensor<T>> {
        self.logits_masked(None, tokens, batch, seq)
    }

    pub fn logits_masked(&self, masks: Option<&MaskSet<T>>, tokens: &[u32], batch: usize, seq: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.to_tape(&mut tape, false);
        let m = match masks {
            Some(m) => {
                m.check_against(&self.config)?;
                Some(m.to_tape(&mut tape, false))
            }
            None => None,
        };
        let out = forward(&mut tape, &self.config, &p, m.as_ref(), tokens, batch, seq)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig::uniform(2, 2, 4, 8, 12, 11, 6)
    }

    fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
    }

    #[test]
    fn count_with_no_layers_untied() {
        let mut c = ModelConfig::uniform(0, 0, 1, 4, 0, 10, 8);
        c.tie_embeddings = false;
        assert_eq!(count_parameters(&c), 10 * 4 + 8 * 4 + 2 * 4 + 4 * 10);
    }

    #[test]
    fn count_is_linear_in_ffn_width() {
        let a = ModelConfig::uniform(3, 2, 4, 8, 12, 11, 6);
        let b = ModelConfig::uniform(3, 2, 4, 8, 24, 11, 6);
        assert_eq!(count_parameters(&b) - count_parameters(&a), 3 * (2 * 8 * 12));
    }

    #[test]
    fn count_matches_stored_tensors() {
        for tie in [true, false] {
            let mut c = tiny();
            c.tie_embeddings = tie;
            c.heads = vec![2, 0];
            c.ffn = vec![5, 12];
            let p = ModelParameters::<f32>::init(&c, 1).unwrap();
            let walked: usize = p.named_tensors().iter().map(|(_, t)| t.numel()).sum();
            assert_eq!(walked, count_parameters(&c));
            p.check_against(&c).unwrap();
        }
    }

    #[test]
    fn all_ones_masks_are_bitwise_identity() {
        let m = Transformer::<f32>::init(tiny(), 3).unwrap();
        let toks = tokens(12, 11, 4);
        let plain = m.logits(&toks, 2, 6).unwrap();
        let masked = m.logits_masked(Some(&MaskSet::ones(&m.config)), &toks, 2, 6).unwrap();
        assert_eq!(plain.data(), masked.data());
    }

    #[test]
    fn zero_block_masks_leave_embedding_path() {
        let m = Transformer::<f64>::init(tiny(), 5).unwrap();
        let toks = tokens(6, 11, 6);
        let mut masks = MaskSet::ones(&m.config);
        for h in &mut masks.heads {
            h.iter_mut().for_each(|v| *v = 0.0);
        }
        for n in &mut masks.neurons {
            n.iter_mut().for_each(|v| *v = 0.0);
        }
        let got = m.logits_masked(Some(&masks), &toks, 1, 6).unwrap();

        let mut tape = Tape::new();
        let p = m.params.to_tape(&mut tape, false);
        let x = embed(&mut tape, &m.config, &p, &toks, 1, 6).unwrap();
        let h = norm(&mut tape, x, p.lnf_gain, p.lnf_bias, None).unwrap();
        let want = tape.matmul_bt(h, p.tok_emb).unwrap();
        assert_eq!(got.data(), tape.value(want).data());
    }

    #[test]
    fn forward_is_causal() {
        let m = Transformer::<f64>::init(tiny(), 7).unwrap();
        let mut toks = tokens(6, 11, 8);
        let before = m.logits(&toks, 1, 6).unwrap();
        toks[3] = (toks[3] + 1) % 11;
        let after = m.logits(&toks, 1, 6).unwrap();
        for r in 0..3 {
            assert_eq!(before.row(r), after.row(r));
        }
        assert_ne!(before.row(3), after.row(3));
    }

    #[test]
    fn out_of_range_token_is_input_error() {
        let m = Transformer::<f32>::init(tiny(), 1).unwrap();
        assert!(matches!(m.logits(&[0, 11], 1, 2), Err(Error::Input(_))));
        assert!(matches!(m.logits(&[0; 7], 1, 7), Err(Error::Input(_))));
    }

    fn block_output(m: &Transformer<f64>, masks: &MaskSet<f64>, toks: &[u32], attention: bool) -> Tensor<f64> {
        let mut tape = Tape::new();
        let p = m.params.to_tape(&mut tape, false);
        let mv = masks.to_tape(&mut tape, false);
        let x = embed(&mut tape, &m.config, &p, toks, 1, toks.len()).unwrap();
        let o = if attention {
            attention_block(&mut tape, &m.config, 1, &p.layers[1], Some(&mv), x, 1, toks.len())
        } else {
            ffn_block(&mut tape, &m.config, 1, &p.layers[1], Some(&mv), x)
        };
        tape.value(o.unwrap().unwrap()).clone()
    }

    #[test]
    fn block_contribution_is_linear_in_head_and_neuron_masks() {
        let m = Transformer::<f64>::init(tiny(), 9).unwrap();
        let toks = tokens(5, 11, 10);
        for attention in [true, false] {
            let at = |v: f64| {
                let mut masks = MaskSet::ones(&m.config);
                if attention {
                    masks.heads[1][0] = v;
                } else {
                    masks.neurons[1][3] = v;
                }
                block_output(&m, &masks, &toks, attention)
            };
            let (zero, half, one) = (at(0.0), at(0.5), at(1.0));
            for ((h, z), o) in half.data().iter().zip(zero.data()).zip(one.data()) {
                assert!((h - 0.5 * (z + o)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn digest_tracks_values() {
        let a = ModelParameters::<f32>::init(&tiny(), 1).unwrap();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.lnf_bias.data_mut()[0] = 0.5;
        assert_ne!(a.digest(), b.digest());
    }
}
