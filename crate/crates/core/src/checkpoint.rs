//! Binary checkpoint format.
//!
//! Layout: magic `CGLB`, u32 LE version, u64 LE header length, a JSON
//! header (config, tensor manifest, optional tokenizer), then every tensor
//! as little-endian f32 values in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Tokenizer;
use crate::error::{Error, Result};
use crate::model::{tensor_manifest, LayerParams, ModelConfig, ModelParameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CGLB";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokenizer: Option<Tokenizer>,
}

/// Contents of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub params: ModelParameters<T>,
    pub tokenizer: Option<Tokenizer>,
}

pub fn save_checkpoint<T: Scalar>(config: &ModelConfig, params: &ModelParameters<T>, path: &Path) -> Result<()> {
    save_checkpoint_with(config, params, None, path)
}

/// Writes a checkpoint, optionally recording the tokenizer the model was
/// trained with. The file is written to a temporary sibling and renamed.
pub fn save_checkpoint_with<T: Scalar>(
    config: &ModelConfig,
    params: &ModelParameters<T>,
    tokenizer: Option<&Tokenizer>,
    path: &Path,
) -> Result<()> {
    params.check_against(config)?;
    let header = Header {
        config: config.clone(),
        tensors: params
            .named_tensors()
            .into_iter()
            .map(|(name, t)| ManifestEntry { name, shape: t.shape().to_vec() })
            .collect(),
        tokenizer: tokenizer.cloned(),
    };
    let text = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(&tmp, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(text.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&text).map_err(io)?;
        for (_, t) in params.named_tensors() {
            for &v in t.data() {
                w.write_all(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated file while reading {what}")),
        _ => Error::Format(format!("read error in {what}: {e}")),
    })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic bytes {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    read_exact(&mut r, &mut b4, "version")?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut b8 = [0u8; 8];
    read_exact(&mut r, &mut b8, "header length")?;
    let len = u64::from_le_bytes(b8);
    if len > 1 << 30 {
        return Err(Error::Format(format!("implausible header length {len}")));
    }
    let mut text = vec![0u8; len as usize];
    read_exact(&mut r, &mut text, "header")?;
    let header: Header = serde_json::from_slice(&text).map_err(|e| Error::Format(format!("header: {e}")))?;
    header.config.validate().map_err(|e| Error::Format(e.to_string()))?;

    let expected = tensor_manifest(&header.config);
    if expected.len() != header.tensors.len()
        || expected.iter().zip(&header.tensors).any(|((n, s), e)| *n != e.name || *s != e.shape)
    {
        return Err(Error::Format("tensor manifest does not match the config extents".into()));
    }
    let mut tensors = Vec::with_capacity(expected.len());
    for (_, shape) in &expected {
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        read_exact(&mut r, &mut raw, "tensor data")?;
        let data: Vec<T> = raw
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        tensors.push(Tensor::new_allow_empty(shape.clone(), data));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Format("trailing bytes after tensor data".into()));
    }
    let params = assemble(&header.config, tensors);
    Ok(Checkpoint { config: header.config, params, tokenizer: header.tokenizer })
}

fn assemble<T: Scalar>(config: &ModelConfig, tensors: Vec<Tensor<T>>) -> ModelParameters<T> {
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("manifest length checked");
    let tok_emb = next();
    let pos_emb = next();
    let layers = (0..config.num_layers())
        .map(|_| LayerParams {
            ln1_gain: next(),
            ln1_bias: next(),
            w_q: next(),
            w_k: next(),
            w_v: next(),
            w_o: next(),
            ln2_gain: next(),
            ln2_bias: next(),
            ffn_in: next(),
            ffn_out: next(),
        })
        .collect();
    let lnf_gain = next();
    let lnf_bias = next();
    let lm_head = (!config.tie_embeddings).then(&mut next);
    ModelParameters { tok_emb, pos_emb, layers, lnf_gain, lnf_bias, lm_head }
}
