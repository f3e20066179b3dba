//! Decoder-only transformer sized for fact-recall experiments.
//!
//! The feed-forward block is kept in its raw key-value form: the input of
//! layer `j`'s FFN is the post-attention residual itself (no second
//! norm), so `y = sum_i sigma(k_i . x) v_i + x` holds verbatim with
//! `k_i` = row `i` of `w_in` and `v_i` = column `i` of `w_out`. Attribution
//! and editing read and write those tensors directly.

mod forward;
mod io;
mod train;

pub use forward::{
    argmax, eval, logits_for,
    tail_sub_backward, tail_sub_forward, AblationSpec, EvalOpts, EvalOutput, KvCache,
    LayerCapture, TailGrad,
};
pub use train::{recall, train_facts, TrainConfig, TrainExample, TrainReport};

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Activation, Mat};

pub const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 2000,
            d_model: 64,
            d_ffn: 256,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 32,
            activation: Activation::Gelu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.n_layers == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("zero-sized model dimension".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        LayerNorm {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }

    /// Normalizes `x` into `out`, returning `(mean, rstd)` for backward.
    pub fn apply(&self, x: &[f32], out: &mut [f32]) -> (f32, f32) {
        let n = x.len() as f32;
        let mean = x.iter().sum::<f32>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for ((o, &v), (&g, &b)) in out
            .iter_mut()
            .zip(x)
            .zip(self.gain.iter().zip(&self.bias))
        {
            *o = (v - mean) * rstd * g + b;
        }
        (mean, rstd)
    }
}

/// One transformer block: pre-norm causal attention, then the raw FFN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub ln1: LayerNorm,
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
    /// `d_ffn x d_model`; row `i` is the key vector of neuron `i`.
    pub w_in: Mat,
    /// `d_model x d_ffn`; column `i` is the value vector of neuron `i`.
    pub w_out: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    /// `vocab x d_model` input embedding.
    pub tok_embedding: Mat,
    /// `max_seq_len x d_model` learned position embedding.
    pub pos_embedding: Mat,
    pub layers: Vec<Layer>,
    pub ln_f: LayerNorm,
    /// `vocab x d_model` output projection, untied from `tok_embedding`.
    pub unembedding: Mat,
}

fn fill_normal(rng: &mut ChaCha8Rng, dist: &Normal<f32>, m: &mut Mat) {
    for v in m.data.iter_mut() {
        *v = dist.sample(rng);
    }
}

impl Model {
    /// Fresh model with N(0, 0.02) weights. The fill order is part of the
    /// reproducibility contract: same seed, same weights.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0f32, 0.02).expect("finite std");
        let d = config.d_model;
        let mut tok_embedding = Mat::zeros(config.vocab_size, d);
        let mut pos_embedding = Mat::zeros(config.max_seq_len, d);
        fill_normal(&mut rng, &dist, &mut tok_embedding);
        fill_normal(&mut rng, &dist, &mut pos_embedding);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut layer = Layer {
                ln1: LayerNorm::identity(d),
                w_q: Mat::zeros(d, d),
                w_k: Mat::zeros(d, d),
                w_v: Mat::zeros(d, d),
                w_o: Mat::zeros(d, d),
                w_in: Mat::zeros(config.d_ffn, d),
                w_out: Mat::zeros(d, config.d_ffn),
            };
            fill_normal(&mut rng, &dist, &mut layer.w_q);
            fill_normal(&mut rng, &dist, &mut layer.w_k);
            fill_normal(&mut rng, &dist, &mut layer.w_v);
            fill_normal(&mut rng, &dist, &mut layer.w_o);
            fill_normal(&mut rng, &dist, &mut layer.w_in);
            fill_normal(&mut rng, &dist, &mut layer.w_out);
            layers.push(layer);
        }
        let ln_f = LayerNorm::identity(d);
        let mut unembedding = Mat::zeros(config.vocab_size, d);
        fill_normal(&mut rng, &dist, &mut unembedding);
        Ok(Model {
            config,
            tok_embedding,
            pos_embedding,
            layers,
            ln_f,
            unembedding,
        })
    }

    pub fn save(&self, path: &std::path::Path, tokenizer: &Tokenizer) -> Result<()> {
        io::save_checkpoint(self, tokenizer, path)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, Tokenizer)> {
        io::load_checkpoint(path)
    }
}

/// Closed-vocabulary word tokenizer. One token per whitespace-separated
/// word; unknown words are schema errors, not silent fallbacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Tokenizer {
    pub fn new(mut words: Vec<String>) -> Result<Self> {
        words.sort();
        words.dedup();
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::Schema(format!("invalid vocabulary word {w:?}")));
            }
            index.insert(w.clone(), i as u32);
        }
        Ok(Tokenizer { words, index })
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Schema(format!("word {word:?} not in vocabulary")))
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = ModelConfig {
            vocab_size: 50,
            d_model: 16,
            d_ffn: 32,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 8,
            ..Default::default()
        };
        let a = Model::init(cfg.clone(), 7).unwrap();
        let b = Model::init(cfg.clone(), 7).unwrap();
        let c = Model::init(cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.layers[0].w_in, c.layers[0].w_in);
    }

    #[test]
    fn tokenizer_round_trip_and_unknown() {
        let t = Tokenizer::new(vec!["bar".into(), "foo".into(), "baz".into()]).unwrap();
        let ids = t.encode("foo bar baz").unwrap();
        assert_eq!(t.decode(&ids), "foo bar baz");
        assert!(t.encode("foo quux").is_err());
    }

    #[test]
    fn config_rejects_bad_heads() {
        let cfg = ModelConfig {
            d_model: 10,
            n_heads: 3,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
