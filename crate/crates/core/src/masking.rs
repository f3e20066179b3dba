//! Sparse neuron masks from attribution matrices.
//!
//! Two selection channels run side by side: a "general" channel scoring
//! each neuron by how many prompts give it positive attribution, and a
//! "specific" channel scoring it by its maximum attribution. Entropy of
//! the attribution distribution sets how many neurons each channel keeps;
//! the mode decides how the two channels combine. All arithmetic here is
//! f64.

use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::attribution::AttributionMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Union,
    GeneralOnly,
    SpecificOnly,
    OverlapOnly,
    NonOverlapOnly,
    Soft,
}

impl MaskMode {
    pub const ALL: [MaskMode; 6] = [
        MaskMode::Union,
        MaskMode::GeneralOnly,
        MaskMode::SpecificOnly,
        MaskMode::OverlapOnly,
        MaskMode::NonOverlapOnly,
        MaskMode::Soft,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    /// Temperature on attribution rows before the entropy softmax.
    pub alpha: f64,
    pub a_general: f64,
    pub b_general: f64,
    pub a_specific: f64,
    pub b_specific: f64,
    pub mode: MaskMode,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            alpha: 1.0,
            a_general: 0.5,
            b_general: 0.3,
            a_specific: 0.5,
            b_specific: 0.3,
            mode: MaskMode::Union,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionScores {
    /// Count of prompts with strictly positive attribution, per neuron.
    pub r_general: Vec<u32>,
    /// Maximum attribution across prompts, per neuron.
    pub r_specific: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyStats {
    pub h_general: f64,
    pub h_specific: f64,
    pub alpha: f64,
    pub rho_general: f64,
    pub rho_specific: f64,
    pub a_ge: f64,
    pub b_ge: f64,
    pub a_sp: f64,
    pub b_sp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronMask {
    pub layer: usize,
    pub bits: Vec<bool>,
    pub soft_weights: Option<Vec<f64>>,
    pub scores: SelectionScores,
    pub stats: EntropyStats,
    pub tau_general: f64,
    pub tau_specific: f64,
    pub mode: MaskMode,
}

impl NeuronMask {
    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn selected_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

fn check_finite(attr: &AttributionMatrix) -> Result<()> {
    if attr.scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite attribution entry".into()));
    }
    Ok(())
}

pub fn selection_scores(attr: &AttributionMatrix) -> Result<SelectionScores> {
    if attr.rows == 0 || attr.cols == 0 {
        return Err(Error::Schema("empty attribution matrix".into()));
    }
    check_finite(attr)?;
    let d = attr.cols;
    let mut r_general = vec![0u32; d];
    let mut r_specific = vec![f64::NEG_INFINITY; d];
    for j in 0..attr.rows {
        let row = attr.row(j);
        for i in 0..d {
            if row[i] > 0.0 {
                r_general[i] += 1;
            }
            if row[i] > r_specific[i] {
                r_specific[i] = row[i];
            }
        }
    }
    Ok(SelectionScores {
        r_general,
        r_specific,
    })
}

pub fn entropy_stats(attr: &AttributionMatrix, cfg: &MaskingConfig) -> Result<EntropyStats> {
    if attr.cols < 2 {
        return Err(Error::Schema("entropy needs at least two neurons".into()));
    }
    if !(cfg.alpha > 0.0) {
        return Err(Error::Config("alpha must be positive".into()));
    }
    check_finite(attr)?;
    let d = attr.cols as f64;
    let n = attr.rows as f64;
    let log_d = d.ln();

    // Mean over prompts of the normalized softmax-row entropy.
    let mut h_general = 0.0f64;
    let mut buf = vec![0.0f64; attr.cols];
    for j in 0..attr.rows {
        let row = attr.row(j);
        let mut mx = f64::NEG_INFINITY;
        for (b, &v) in buf.iter_mut().zip(row) {
            *b = cfg.alpha * v;
            mx = mx.max(*b);
        }
        let mut sum = 0.0;
        for b in buf.iter_mut() {
            *b = (*b - mx).exp();
            sum += *b;
        }
        let mut h_row = 0.0;
        for &b in buf.iter() {
            let p = b / sum;
            if p > 0.0 {
                h_row -= p * p.ln();
            }
        }
        h_general += h_row;
    }
    h_general /= n * log_d;

    // Entropy of the normalized per-neuron maxima; negative maxima carry
    // no selection weight and are clipped to zero first.
    let mut maxima = vec![f64::NEG_INFINITY; attr.cols];
    for j in 0..attr.rows {
        for (m, &v) in maxima.iter_mut().zip(attr.row(j)) {
            if v > *m {
                *m = v;
            }
        }
    }
    let mut total = 0.0;
    for m in maxima.iter_mut() {
        *m = m.max(0.0);
        total += *m;
    }
    let h_specific = if total > 0.0 {
        let mut h = 0.0;
        for &m in &maxima {
            let q = m / total;
            if q > 0.0 {
                h -= q * q.ln();
            }
        }
        h / log_d
    } else {
        0.0
    };

    let rho = |h: f64, a: f64, b: f64| (h * a + b).clamp(0.0, 1.0);
    Ok(EntropyStats {
        h_general,
        h_specific,
        alpha: cfg.alpha,
        rho_general: rho(h_general, cfg.a_general, cfg.b_general),
        rho_specific: rho(h_specific, cfg.a_specific, cfg.b_specific),
        a_ge: cfg.a_general,
        b_ge: cfg.b_general,
        a_sp: cfg.a_specific,
        b_sp: cfg.b_specific,
    })
}

/// Top `ceil(rho * d)` indices by score, ties to the lower index. Returns
/// the selected flags and the threshold (minimum selected score; +inf for
/// an empty selection).
fn select_channel<S: PartialOrd + Copy>(
    scores: &[S],
    rho: f64,
    to_f64: impl Fn(S) -> f64,
) -> (Vec<bool>, f64) {
    let d = scores.len();
    let k = (rho * d as f64).ceil() as usize;
    let k = k.min(d);
    let mut bits = vec![false; d];
    if k == 0 {
        return (bits, f64::INFINITY);
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    for &i in &order[..k] {
        bits[i] = true;
    }
    (bits, to_f64(scores[order[k - 1]]))
}

pub fn build_mask(
    layer: usize,
    scores: &SelectionScores,
    stats: &EntropyStats,
    mode: MaskMode,
) -> Result<NeuronMask> {
    if mode == MaskMode::Soft {
        return Err(Error::Config(
            "soft mode needs attribution scores; use build_soft_mask".into(),
        ));
    }
    let d = scores.r_general.len();
    if d != scores.r_specific.len() {
        return Err(Error::Schema("selection score lengths disagree".into()));
    }
    let (ge_bits, tau_general) =
        select_channel(&scores.r_general, stats.rho_general, |v| v as f64);
    let (sp_bits, tau_specific) = select_channel(&scores.r_specific, stats.rho_specific, |v| v);
    let bits: Vec<bool> = (0..d)
        .map(|i| match mode {
            MaskMode::Union => ge_bits[i] || sp_bits[i],
            MaskMode::GeneralOnly => ge_bits[i],
            MaskMode::SpecificOnly => sp_bits[i],
            MaskMode::OverlapOnly => ge_bits[i] && sp_bits[i],
            MaskMode::NonOverlapOnly => ge_bits[i] ^ sp_bits[i],
            MaskMode::Soft => unreachable!(),
        })
        .collect();
    Ok(NeuronMask {
        layer,
        bits,
        soft_weights: None,
        scores: scores.clone(),
        stats: stats.clone(),
        tau_general,
        tau_specific,
        mode,
    })
}

/// Soft variant: per-neuron weights are the clipped maxima scaled to a
/// unit maximum; bits are simply the positive weights.
pub fn build_soft_mask(attr: &AttributionMatrix, stats: &EntropyStats) -> Result<NeuronMask> {
    let scores = selection_scores(attr)?;
    let mut weights: Vec<f64> = scores.r_specific.iter().map(|&m| m.max(0.0)).collect();
    let peak = weights.iter().cloned().fold(0.0f64, f64::max);
    if peak > 0.0 {
        for w in weights.iter_mut() {
            *w /= peak;
        }
    }
    let bits: Vec<bool> = weights.iter().map(|&w| w > 0.0).collect();
    Ok(NeuronMask {
        layer: attr.layer,
        bits,
        soft_weights: Some(weights),
        scores,
        stats: stats.clone(),
        tau_general: f64::INFINITY,
        tau_specific: f64::INFINITY,
        mode: MaskMode::Soft,
    })
}

/// Full pipeline for one attribution matrix.
pub fn mask_for(attr: &AttributionMatrix, cfg: &MaskingConfig) -> Result<NeuronMask> {
    let stats = entropy_stats(attr, cfg)?;
    if cfg.mode == MaskMode::Soft {
        build_soft_mask(attr, &stats)
    } else {
        let scores = selection_scores(attr)?;
        build_mask(attr.layer, &scores, &stats, cfg.mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskExport {
    pub layer: usize,
    pub mode: MaskMode,
    pub rho_ge: f64,
    pub rho_sp: f64,
    pub tau_ge: Option<f64>,
    pub tau_sp: Option<f64>,
    pub popcount: usize,
    /// Bits packed LSB-first, base64.
    pub bits: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub soft_weights: Option<Vec<f64>>,
    pub n_neurons: usize,
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut bytes = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    bytes
}

fn unpack_bits(bytes: &[u8], n: usize) -> Result<Vec<bool>> {
    if bytes.len() != n.div_ceil(8) {
        return Err(Error::Schema("bitset length mismatch".into()));
    }
    Ok((0..n).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect())
}

impl MaskExport {
    pub fn from_mask(m: &NeuronMask) -> MaskExport {
        let finite = |v: f64| v.is_finite().then_some(v);
        MaskExport {
            layer: m.layer,
            mode: m.mode,
            rho_ge: m.stats.rho_general,
            rho_sp: m.stats.rho_specific,
            tau_ge: finite(m.tau_general),
            tau_sp: finite(m.tau_specific),
            popcount: m.popcount(),
            bits: base64::engine::general_purpose::STANDARD.encode(pack_bits(&m.bits)),
            soft_weights: m.soft_weights.clone(),
            n_neurons: m.bits.len(),
        }
    }

    pub fn bits(&self) -> Result<Vec<bool>> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.bits)
            .map_err(|e| Error::Schema(format!("bad bitset base64: {e}")))?;
        unpack_bits(&bytes, self.n_neurons)
    }
}

pub fn write_mask_json(m: &NeuronMask, path: &Path) -> Result<()> {
    let export = MaskExport::from_mask(m);
    let f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &export)?;
    Ok(())
}
