//! Neuron attribution: how much each FFN neuron contributes to a
//! prediction.
//!
//! Two perturbation scores add one neuron's amplified contribution to
//! the hidden state, project straight through the unembedding, and
//! measure the movement of the target token there (log-probability for
//! `Lps`, raw probability for `Psa`); later layers are never re-run.
//! `Mpc` skips even the projection and takes the neuron's weighted value
//! vector against the target's unembedding row. Score arithmetic is f64
//! throughout; the model itself stays f32.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::log_sum_exp_f64;
use crate::model::{EvalOpts, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributionMethod {
    Lps,
    Psa,
    Mpc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    LastToken,
    Index(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionConfig {
    pub method: AttributionMethod,
    /// Amplification factor applied to the neuron contribution.
    pub lambda: f64,
    pub layers: Vec<usize>,
    pub position: Position,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            method: AttributionMethod::Lps,
            lambda: 10.0,
            layers: vec![1, 2, 3],
            position: Position::LastToken,
        }
    }
}

/// Scores for one layer over a set of prompts: `rows` prompts by `cols`
/// neurons, row-major f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMatrix {
    pub layer: usize,
    pub method: AttributionMethod,
    pub rows: usize,
    pub cols: usize,
    pub scores: Vec<f64>,
}

impl AttributionMatrix {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.cols + col]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.scores[r * self.cols..(r + 1) * self.cols]
    }

    /// Neurons with a nonzero score in any row.
    pub fn active_neurons(&self) -> usize {
        (0..self.cols)
            .filter(|&i| (0..self.rows).any(|j| self.get(j, i) != 0.0))
            .count()
    }
}

/// Hidden state projected straight through the unembedding, in f64.
fn project_logits(model: &Model, x: &[f32]) -> Vec<f64> {
    let d = model.config.d_model;
    let mut z = vec![0.0f64; model.config.vocab_size];
    for (t, zt) in z.iter_mut().enumerate() {
        let e = model.unembedding.row(t);
        let mut acc = 0.0f64;
        for r in 0..d {
            acc += e[r] as f64 * x[r] as f64;
        }
        *zt = acc;
    }
    z
}

fn logp_at(z: &[f64], target: usize) -> f64 {
    z[target] - log_sum_exp_f64(z)
}

/// Target softmax mass in one fused pass: running max, rescaled sum.
fn prob_at(z: &[f64], target: usize) -> f64 {
    let mut m = f64::NEG_INFINITY;
    let mut s = 0.0f64;
    for &v in z {
        if v <= m {
            s += (v - m).exp();
        } else {
            s = s * (m - v).exp() + 1.0;
            m = v;
        }
    }
    (z[target] - m).exp() / s
}

/// Row i is the unembedding image of value vector i; a perturbed
/// neuron shifts the projected logits by lambda times its activation
/// times that row.
fn unembedded_values(model: &Model, layer: usize) -> Vec<f64> {
    let v_sz = model.config.vocab_size;
    let d = model.config.d_model;
    let d_ffn = model.config.d_ffn;
    let w_out = &model.layers[layer].w_out;
    let mut out = vec![0.0f64; d_ffn * v_sz];
    let mut col = vec![0.0f64; d];
    for i in 0..d_ffn {
        for (r, c) in col.iter_mut().enumerate() {
            *c = w_out.get(r, i) as f64;
        }
        let row_out = &mut out[i * v_sz..(i + 1) * v_sz];
        for (t, slot) in row_out.iter_mut().enumerate() {
            let e = model.unembedding.row(t);
            let mut acc = 0.0f64;
            for r in 0..d {
                acc += e[r] as f64 * col[r];
            }
            *slot = acc;
        }
    }
    out
}

/// One projection table per configured layer; `Mpc` needs none.
fn value_projections(model: &Model, cfg: &AttributionConfig) -> Vec<Option<Vec<f64>>> {
    cfg.layers
        .iter()
        .map(|&l| match cfg.method {
            AttributionMethod::Mpc => None,
            AttributionMethod::Lps | AttributionMethod::Psa => {
                Some(unembedded_values(model, l))
            }
        })
        .collect()
}

/// Per-layer scores for one prompt. `target` is the token whose
/// probability movement is measured at the configured position.
pub fn score_prompt(
    model: &Model,
    ids: &[u32],
    target: u32,
    cfg: &AttributionConfig,
) -> Result<Vec<Vec<f64>>> {
    let tables = value_projections(model, cfg);
    score_prompt_with(model, ids, target, cfg, &tables)
}

fn score_prompt_with(
    model: &Model,
    ids: &[u32],
    target: u32,
    cfg: &AttributionConfig,
    tables: &[Option<Vec<f64>>],
) -> Result<Vec<Vec<f64>>> {
    let d_ffn = model.config.d_ffn;
    let d = model.config.d_model;
    let v_sz = model.config.vocab_size;
    let y = target as usize;
    if y >= v_sz {
        return Err(Error::Schema(format!("target token {target} outside vocab {v_sz}")));
    }
    let pos = match cfg.position {
        Position::LastToken => ids.len().checked_sub(1).ok_or_else(|| {
            Error::Schema("empty prompt".into())
        })?,
        Position::Index(p) => p,
    };
    // Captures come back in forward order; requiring ascending layers
    // keeps them aligned with the per-layer outputs.
    for w in cfg.layers.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Config("attribution layers must be strictly ascending".into()));
        }
    }
    for &l in &cfg.layers {
        if l >= model.config.n_layers {
            return Err(Error::Config(format!("attribution layer {l} out of range")));
        }
    }
    let opts = EvalOpts {
        capture_layers: &cfg.layers,
        capture_pos: Some(pos),
        ..Default::default()
    };
    let base = crate::model::eval(model, ids, &opts)?;
    let lambda = cfg.lambda;

    let mut out = Vec::with_capacity(cfg.layers.len());
    for (cap, table) in base.captures.iter().zip(tables) {
        let mut scores = vec![0.0f64; d_ffn];
        match cfg.method {
            AttributionMethod::Mpc => {
                // sigma(k_i . x) * (e_y . v_i), all neurons in one pass.
                let w_out = &model.layers[cap.layer].w_out;
                let e = model.unembedding.row(y);
                let mut proj = vec![0.0f64; d_ffn];
                for r in 0..d {
                    let er = e[r] as f64;
                    if er != 0.0 {
                        for (p, &w) in proj.iter_mut().zip(w_out.row(r)) {
                            *p += er * w as f64;
                        }
                    }
                }
                for i in 0..d_ffn {
                    scores[i] = cap.ffn_act[i] as f64 * proj[i];
                }
            }
            AttributionMethod::Lps => {
                let shifts = table.as_deref().expect("projection table");
                let z = project_logits(model, &cap.ffn_input);
                let base_logp = logp_at(&z, y);
                let mut buf = vec![0.0f64; v_sz];
                for (i, score) in scores.iter_mut().enumerate() {
                    let la = lambda * cap.ffn_act[i] as f64;
                    if la == 0.0 {
                        continue;
                    }
                    let c = &shifts[i * v_sz..(i + 1) * v_sz];
                    let mut m = f64::NEG_INFINITY;
                    for t in 0..v_sz {
                        let zt = z[t] + la * c[t];
                        buf[t] = zt;
                        if zt > m {
                            m = zt;
                        }
                    }
                    let mut s = 0.0f64;
                    for &zt in &buf {
                        s += (zt - m).exp();
                    }
                    *score = (buf[y] - m - s.ln()) - base_logp;
                }
            }
            AttributionMethod::Psa => {
                let shifts = table.as_deref().expect("projection table");
                let z = project_logits(model, &cap.ffn_input);
                let base_p = prob_at(&z, y);
                for (i, score) in scores.iter_mut().enumerate() {
                    let la = lambda * cap.ffn_act[i] as f64;
                    if la == 0.0 {
                        continue;
                    }
                    let c = &shifts[i * v_sz..(i + 1) * v_sz];
                    let mut m = f64::NEG_INFINITY;
                    let mut s = 0.0f64;
                    for t in 0..v_sz {
                        let zt = z[t] + la * c[t];
                        if zt <= m {
                            s += (zt - m).exp();
                        } else {
                            s = s * (m - zt).exp() + 1.0;
                            m = zt;
                        }
                    }
                    *score = (z[y] + la * c[y] - m).exp() / s - base_p;
                }
            }
        }
        out.push(scores);
    }
    Ok(out)
}

/// Stacks per-prompt scores into one matrix per requested layer.
pub fn attribution_matrices(
    model: &Model,
    prompts: &[(Vec<u32>, u32)],
    cfg: &AttributionConfig,
) -> Result<Vec<AttributionMatrix>> {
    let d_ffn = model.config.d_ffn;
    let mut mats: Vec<AttributionMatrix> = cfg
        .layers
        .iter()
        .map(|&layer| AttributionMatrix {
            layer,
            method: cfg.method,
            rows: prompts.len(),
            cols: d_ffn,
            scores: Vec::with_capacity(prompts.len() * d_ffn),
        })
        .collect();
    // Projection tables depend only on the weights; one build serves
    // the whole batch.
    let tables = value_projections(model, cfg);
    for (ids, target) in prompts {
        let per_layer = score_prompt_with(model, ids, *target, cfg, &tables)?;
        for (m, s) in mats.iter_mut().zip(per_layer) {
            m.scores.extend_from_slice(&s);
        }
    }
    Ok(mats)
}

pub fn write_csv(m: &AttributionMatrix, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    for r in 0..m.rows {
        let row = m.row(r);
        let mut line = String::with_capacity(row.len() * 12);
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            line.push_str(&format!("{v:e}"));
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    w.flush()?;
    Ok(())
}

const BIN_FORMAT: &str = "attr/v1";

#[derive(Serialize, Deserialize)]
struct BinHeader {
    format: String,
    layer: usize,
    method: AttributionMethod,
    rows: usize,
    cols: usize,
}

pub fn write_binary(m: &AttributionMatrix, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    let header = BinHeader {
        format: BIN_FORMAT.into(),
        layer: m.layer,
        method: m.method,
        rows: m.rows,
        cols: m.cols,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for v in &m.scores {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary(path: &Path) -> Result<AttributionMatrix> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header_bytes = Vec::new();
    let mut b = [0u8; 1];
    loop {
        if r.read(&mut b)? == 0 {
            return Err(Error::Schema("attribution file truncated".into()));
        }
        if b[0] == b'\n' {
            break;
        }
        header_bytes.push(b[0]);
    }
    let header: BinHeader = serde_json::from_slice(&header_bytes)?;
    if header.format != BIN_FORMAT {
        return Err(Error::Schema(format!("unsupported format {:?}", header.format)));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != header.rows * header.cols * 8 {
        return Err(Error::Schema("attribution payload length mismatch".into()));
    }
    let scores = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(AttributionMatrix {
        layer: header.layer,
        method: header.method,
        rows: header.rows,
        cols: header.cols,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            vocab_size: 25,
            d_model: 16,
            d_ffn: 20,
            n_layers: 3,
            n_heads: 2,
            max_seq_len: 8,
            ..Default::default()
        };
        Model::init(cfg, 13).unwrap()
    }

    #[test]
    fn zero_lambda_scores_are_exactly_zero() {
        let m = tiny_model();
        let cfg = AttributionConfig {
            lambda: 0.0,
            layers: vec![0, 1, 2],
            ..Default::default()
        };
        let scores = score_prompt(&m, &[1, 4, 9], 7, &cfg).unwrap();
        for layer in scores {
            assert!(layer.iter().all(|&s| s == 0.0));
        }
    }

    #[test]
    fn mpc_matches_direct_formula() {
        let m = tiny_model();
        let cfg = AttributionConfig {
            method: AttributionMethod::Mpc,
            layers: vec![1],
            ..Default::default()
        };
        let ids = [2u32, 8, 3];
        let target = 11u32;
        let scores = score_prompt(&m, &ids, target, &cfg).unwrap();
        let opts = EvalOpts {
            capture_layers: &[1],
            ..Default::default()
        };
        let out = crate::model::eval(&m, &ids, &opts).unwrap();
        let cap = &out.captures[0];
        for i in 0..m.config.d_ffn {
            let mut e_dot_v = 0.0f64;
            for r in 0..m.config.d_model {
                e_dot_v += m.unembedding.get(target as usize, r) as f64
                    * m.layers[1].w_out.get(r, i) as f64;
            }
            let want = cap.ffn_act[i] as f64 * e_dot_v;
            assert!((scores[0][i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn lps_psa_agree_on_sign_for_dominant_moves() {
        // When a perturbation raises the target probability, both the
        // log-space and probability-space deltas are positive.
        let m = tiny_model();
        let ids = [5u32, 1, 14, 3];
        let target = 6u32;
        let lps = score_prompt(
            &m,
            &ids,
            target,
            &AttributionConfig {
                method: AttributionMethod::Lps,
                layers: vec![1],
                ..Default::default()
            },
        )
        .unwrap();
        let psa = score_prompt(
            &m,
            &ids,
            target,
            &AttributionConfig {
                method: AttributionMethod::Psa,
                layers: vec![1],
                ..Default::default()
            },
        )
        .unwrap();
        let mut nonzero = 0;
        for (l, p) in lps[0].iter().zip(&psa[0]) {
            if l.abs() > 1e-9 {
                nonzero += 1;
                assert_eq!(l > &0.0, p > &0.0, "lps={l} psa={p}");
            }
        }
        assert!(nonzero > 5);
    }

    #[test]
    fn index_position_matches_last_token_when_equal() {
        let m = tiny_model();
        let ids = [9u32, 2, 17];
        let base = AttributionConfig {
            layers: vec![0, 2],
            ..Default::default()
        };
        let by_last = score_prompt(&m, &ids, 4, &base).unwrap();
        let by_index = score_prompt(
            &m,
            &ids,
            4,
            &AttributionConfig {
                position: Position::Index(2),
                ..base
            },
        )
        .unwrap();
        assert_eq!(by_last, by_index);
    }

    #[test]
    fn lps_matches_direct_projection_recomputation() {
        // Independent recomputation per neuron: perturb the captured
        // hidden state, unembed it, diff the target log-softmax.
        let m = tiny_model();
        let ids = [9u32, 2, 17, 1];
        let target = 4u32;
        let cfg = AttributionConfig {
            method: AttributionMethod::Lps,
            position: Position::Index(1),
            layers: vec![1],
            ..Default::default()
        };
        let scores = score_prompt(&m, &ids, target, &cfg).unwrap();

        let opts = EvalOpts {
            capture_layers: &[1],
            capture_pos: Some(1),
            ..Default::default()
        };
        let base = crate::model::eval(&m, &ids, &opts).unwrap();
        let cap = &base.captures[0];
        let logp = |x: &[f64]| {
            let z: Vec<f64> = (0..m.config.vocab_size)
                .map(|t| {
                    let e = m.unembedding.row(t);
                    x.iter().zip(e).map(|(&xv, &ev)| xv * ev as f64).sum()
                })
                .collect();
            logp_at(&z, target as usize)
        };
        let x0: Vec<f64> = cap.ffn_input.iter().map(|&v| v as f64).collect();
        let base_logp = logp(&x0);
        for i in 0..m.config.d_ffn {
            let mut x_new = x0.clone();
            for r in 0..m.config.d_model {
                x_new[r] += 10.0 * cap.ffn_act[i] as f64 * m.layers[1].w_out.get(r, i) as f64;
            }
            let want = logp(&x_new) - base_logp;
            assert!((scores[0][i] - want).abs() < 1e-9, "neuron {i}");
        }
        assert!(scores[0].iter().filter(|s| s.abs() > 0.0).count() > 5);
    }

    #[test]
    fn value_aligned_with_target_row_scores_positive() {
        // A value vector pointing along the target's unembedding row
        // can only push the target up.
        let mut m = tiny_model();
        let ids = [2u32, 8, 3];
        let target = 11u32;
        let opts = EvalOpts {
            capture_layers: &[1],
            ..Default::default()
        };
        let out = crate::model::eval(&m, &ids, &opts).unwrap();
        let i = (0..m.config.d_ffn)
            .max_by(|&a, &b| {
                out.captures[0].ffn_act[a].total_cmp(&out.captures[0].ffn_act[b])
            })
            .expect("non-empty ffn");
        assert!(out.captures[0].ffn_act[i] > 0.0);
        for r in 0..m.config.d_model {
            let e = m.unembedding.get(target as usize, r);
            m.layers[1].w_out.set(r, i, 2.0 * e);
        }
        let cfg = AttributionConfig {
            method: AttributionMethod::Lps,
            layers: vec![1],
            ..Default::default()
        };
        let scores = score_prompt(&m, &ids, target, &cfg).unwrap();
        assert!(scores[0][i] > 0.0);
    }

    #[test]
    fn small_lambda_scores_scale_linearly() {
        let m = tiny_model();
        let ids = [5u32, 1, 14, 3];
        let target = 6u32;
        let at = |lambda: f64| {
            score_prompt(
                &m,
                &ids,
                target,
                &AttributionConfig {
                    method: AttributionMethod::Lps,
                    lambda,
                    layers: vec![1],
                    ..Default::default()
                },
            )
            .unwrap()
        };
        let lo = at(5e-4);
        let hi = at(1e-3);
        let mut checked = 0;
        for (l, h) in lo[0].iter().zip(&hi[0]) {
            if h.abs() > 1e-12 {
                assert!((2.0 * l - h).abs() <= 0.05 * h.abs(), "lo={l} hi={h}");
                checked += 1;
            }
        }
        assert!(checked > 5);
    }

    #[test]
    fn export_round_trips() {
        let m = tiny_model();
        let mats = attribution_matrices(
            &m,
            &[(vec![1, 2, 3], 5), (vec![4, 5], 9)],
            &AttributionConfig {
                layers: vec![1],
                ..Default::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("a.attr");
        write_binary(&mats[0], &bin).unwrap();
        let back = read_binary(&bin).unwrap();
        assert_eq!(mats[0], back);

        let csv = dir.path().join("a.csv");
        write_csv(&mats[0], &csv).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), 2);
        let first: Vec<&str> = text.lines().next().unwrap().split(',').collect();
        assert_eq!(first.len(), m.config.d_ffn);
        let parsed: f64 = first[3].parse().unwrap();
        assert!((parsed - mats[0].get(0, 3)).abs() <= mats[0].get(0, 3).abs() * 1e-12 + 1e-300);
    }
}
