//! Checkpoint files: one JSON header line describing config, tokenizer,
//! and tensor layout, then a flat little-endian f32 payload. The payload
//! hash is stored in the header, so equal checkpoints compare equal as
//! whole files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::math::Mat;

use super::{Model, ModelConfig, Tokenizer};

const FORMAT: &str = "ckpt/v1";

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset into the payload, in f32 elements.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: ModelConfig,
    tokenizer: Tokenizer,
    tensors: Vec<TensorMeta>,
    payload_f32_len: usize,
    payload_sha256: String,
}

/// Tensors in checkpoint order, paired with names. The order is frozen;
/// readers index by name but writers always emit this layout.
fn tensor_views(model: &Model) -> Vec<(String, usize, usize, Vec<f32>)> {
    let mut out = Vec::new();
    let push_mat = |out: &mut Vec<(String, usize, usize, Vec<f32>)>, name: String, m: &Mat| {
        out.push((name, m.rows, m.cols, m.data.clone()));
    };
    let push_vec = |out: &mut Vec<(String, usize, usize, Vec<f32>)>, name: String, v: &[f32]| {
        out.push((name, 1, v.len(), v.to_vec()));
    };
    push_mat(&mut out, "tok_embedding".into(), &model.tok_embedding);
    push_mat(&mut out, "pos_embedding".into(), &model.pos_embedding);
    for (i, l) in model.layers.iter().enumerate() {
        push_vec(&mut out, format!("layers.{i}.ln1.gain"), &l.ln1.gain);
        push_vec(&mut out, format!("layers.{i}.ln1.bias"), &l.ln1.bias);
        push_mat(&mut out, format!("layers.{i}.w_q"), &l.w_q);
        push_mat(&mut out, format!("layers.{i}.w_k"), &l.w_k);
        push_mat(&mut out, format!("layers.{i}.w_v"), &l.w_v);
        push_mat(&mut out, format!("layers.{i}.w_o"), &l.w_o);
        push_mat(&mut out, format!("layers.{i}.w_in"), &l.w_in);
        push_mat(&mut out, format!("layers.{i}.w_out"), &l.w_out);
    }
    push_vec(&mut out, "ln_f.gain".into(), &model.ln_f.gain);
    push_vec(&mut out, "ln_f.bias".into(), &model.ln_f.bias);
    push_mat(&mut out, "unembedding".into(), &model.unembedding);
    out
}

pub fn save_checkpoint(model: &Model, tokenizer: &Tokenizer, path: &Path) -> Result<()> {
    let views = tensor_views(model);
    let mut tensors = Vec::with_capacity(views.len());
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, rows, cols, data) in &views {
        tensors.push(TensorMeta {
            name: name.clone(),
            rows: *rows,
            cols: *cols,
            offset,
        });
        offset += data.len();
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sha = format!("{:x}", Sha256::digest(&payload));
    let header = Header {
        format: FORMAT.into(),
        config: model.config.clone(),
        tokenizer: tokenizer.clone(),
        tensors,
        payload_f32_len: offset,
        payload_sha256: sha,
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Tokenizer)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(Error::Schema("checkpoint truncated before header end".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
    }
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.format != FORMAT {
        return Err(Error::Schema(format!(
            "unsupported checkpoint format {:?}",
            header.format
        )));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != header.payload_f32_len * 4 {
        return Err(Error::Schema(format!(
            "payload length {} does not match header ({} floats)",
            payload.len(),
            header.payload_f32_len
        )));
    }
    let sha = format!("{:x}", Sha256::digest(&payload));
    if sha != header.payload_sha256 {
        return Err(Error::Schema("checkpoint payload hash mismatch".into()));
    }

    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let tensor = |name: &str| -> Result<Mat> {
        let meta = header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Schema(format!("tensor {name:?} missing from checkpoint")))?;
        let len = meta.rows * meta.cols;
        if meta.offset + len > floats.len() {
            return Err(Error::Schema(format!("tensor {name:?} out of payload bounds")));
        }
        Ok(Mat::from_vec(
            meta.rows,
            meta.cols,
            floats[meta.offset..meta.offset + len].to_vec(),
        ))
    };

    let cfg = header.config.clone();
    cfg.validate()?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        layers.push(super::Layer {
            ln1: super::LayerNorm {
                gain: tensor(&format!("layers.{i}.ln1.gain"))?.data,
                bias: tensor(&format!("layers.{i}.ln1.bias"))?.data,
            },
            w_q: tensor(&format!("layers.{i}.w_q"))?,
            w_k: tensor(&format!("layers.{i}.w_k"))?,
            w_v: tensor(&format!("layers.{i}.w_v"))?,
            w_o: tensor(&format!("layers.{i}.w_o"))?,
            w_in: tensor(&format!("layers.{i}.w_in"))?,
            w_out: tensor(&format!("layers.{i}.w_out"))?,
        });
    }
    let mut tokenizer = header.tokenizer;
    tokenizer.rebuild_index();
    let model = Model {
        config: cfg,
        tok_embedding: tensor("tok_embedding")?,
        pos_embedding: tensor("pos_embedding")?,
        layers,
        ln_f: super::LayerNorm {
            gain: tensor("ln_f.gain")?.data,
            bias: tensor("ln_f.bias")?.data,
        },
        unembedding: tensor("unembedding")?,
    };
    if model.tok_embedding.rows != model.config.vocab_size {
        return Err(Error::Schema("embedding shape disagrees with config".into()));
    }
    Ok((model, tokenizer))
}
