//! Drift and neuron-statistics analyses over checkpoints and attribution
//! matrices. Everything here is read-only.

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionMatrix;
use crate::error::{Error, Result};
use crate::masking::{build_mask, entropy_stats, selection_scores, MaskMode, MaskingConfig};
use crate::model::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDrift {
    pub layer: usize,
    pub wasserstein_1d: f64,
    pub cosine_mean: f64,
    pub cosine_std: f64,
    pub l2_mean: f64,
    pub l2_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftStats {
    pub layers: Vec<LayerDrift>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    (mean, var.sqrt())
}

/// Column-wise displacement of `w_out` between two checkpoints of the
/// same shape. Bit-identical columns score cosine 1 and l2 0 exactly; a
/// zero column against a nonzero one scores cosine 0.
pub fn drift(base: &Model, edited: &Model) -> Result<DriftStats> {
    if base.config != edited.config {
        return Err(Error::Schema("drift between different model shapes".into()));
    }
    let mut layers = Vec::with_capacity(base.config.n_layers);
    for (li, (bl, el)) in base.layers.iter().zip(&edited.layers).enumerate() {
        let wb = &bl.w_out;
        let we = &el.w_out;
        let d_ffn = wb.cols;
        let d = wb.rows;
        let mut cosines = Vec::with_capacity(d_ffn);
        let mut l2s = Vec::with_capacity(d_ffn);
        let mut norms_b = Vec::with_capacity(d_ffn);
        let mut norms_e = Vec::with_capacity(d_ffn);
        for c in 0..d_ffn {
            let mut dot = 0.0f64;
            let mut nb = 0.0f64;
            let mut ne = 0.0f64;
            let mut dl2 = 0.0f64;
            let mut identical = true;
            for r in 0..d {
                let a = wb.get(r, c);
                let b = we.get(r, c);
                if a.to_bits() != b.to_bits() {
                    identical = false;
                }
                let (af, bf) = (a as f64, b as f64);
                dot += af * bf;
                nb += af * af;
                ne += bf * bf;
                dl2 += (af - bf) * (af - bf);
            }
            norms_b.push(nb.sqrt());
            norms_e.push(ne.sqrt());
            l2s.push(if identical { 0.0 } else { dl2.sqrt() });
            let cos = if identical {
                1.0
            } else if nb == 0.0 && ne == 0.0 {
                1.0
            } else if nb == 0.0 || ne == 0.0 {
                0.0
            } else {
                dot / (nb.sqrt() * ne.sqrt())
            };
            cosines.push(cos);
        }
        norms_b.sort_by(f64::total_cmp);
        norms_e.sort_by(f64::total_cmp);
        let wasserstein = norms_b
            .iter()
            .zip(&norms_e)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / d_ffn as f64;
        let (cm, cs) = mean_std(&cosines);
        let (lm, ls) = mean_std(&l2s);
        layers.push(LayerDrift {
            layer: li,
            wasserstein_1d: wasserstein,
            cosine_mean: cm,
            cosine_std: cs,
            l2_mean: lm,
            l2_std: ls,
        });
    }
    Ok(DriftStats { layers })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRoles {
    pub layer: usize,
    pub general: usize,
    pub specific: usize,
    pub overlap: usize,
    /// overlap / min(general, specific); 0 when either channel is empty.
    pub overlap_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleProfile {
    pub layers: Vec<LayerRoles>,
}

/// Counts each layer's general-channel and specific-channel selections at
/// the configured ratios, and their intersection.
pub fn role_profile(mats: &[AttributionMatrix], cfg: &MaskingConfig) -> Result<RoleProfile> {
    let mut layers = Vec::with_capacity(mats.len());
    for m in mats {
        let scores = selection_scores(m)?;
        let stats = entropy_stats(m, cfg)?;
        let ge = build_mask(m.layer, &scores, &stats, MaskMode::GeneralOnly)?;
        let sp = build_mask(m.layer, &scores, &stats, MaskMode::SpecificOnly)?;
        let overlap = ge
            .bits
            .iter()
            .zip(&sp.bits)
            .filter(|(&g, &s)| g && s)
            .count();
        let (g, s) = (ge.popcount(), sp.popcount());
        let denom = g.min(s);
        layers.push(LayerRoles {
            layer: m.layer,
            general: g,
            specific: s,
            overlap,
            overlap_ratio: if denom == 0 { 0.0 } else { overlap as f64 / denom as f64 },
        });
    }
    Ok(RoleProfile { layers })
}

/// Bytes per attribution coefficient in the compact deployed form.
pub const COEFF_BYTES: usize = 4;
/// Per-layer scalar statistics kept alongside a mask: two entropies, two
/// ratios, two thresholds, the sharpening factor, and the popcount.
pub const SCALAR_STATS_BYTES: usize = 8 * 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMemory {
    pub layer: usize,
    pub prompt_rows: usize,
    pub coeff_bytes: usize,
    pub bitset_bytes: usize,
    pub scalar_bytes: usize,
    pub nonzero_neurons: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryAccounting {
    pub layers: Vec<LayerMemory>,
    pub total_bytes: usize,
}

pub fn memory_accounting(mats: &[AttributionMatrix]) -> MemoryAccounting {
    let mut layers = Vec::with_capacity(mats.len());
    let mut total = 0usize;
    for m in mats {
        let coeff = m.rows * m.cols * COEFF_BYTES;
        let bitset = m.cols.div_ceil(8);
        let lm = LayerMemory {
            layer: m.layer,
            prompt_rows: m.rows,
            coeff_bytes: coeff,
            bitset_bytes: bitset,
            scalar_bytes: SCALAR_STATS_BYTES,
            nonzero_neurons: m.active_neurons(),
        };
        total += coeff + bitset + SCALAR_STATS_BYTES;
        layers.push(lm);
    }
    MemoryAccounting { layers, total_bytes: total }
}

pub fn write_drift_csv(stats: &DriftStats, path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "layer,wasserstein_1d,cosine_mean,cosine_std,l2_mean,l2_std")?;
    for l in &stats.layers {
        writeln!(
            f,
            "{},{:e},{:e},{:e},{:e},{:e}",
            l.layer, l.wasserstein_1d, l.cosine_mean, l.cosine_std, l.l2_mean, l.l2_std
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_role_csv(profile: &RoleProfile, path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "layer,general,specific,overlap,overlap_ratio")?;
    for l in &profile.layers {
        writeln!(
            f,
            "{},{},{},{},{:e}",
            l.layer, l.general, l.specific, l.overlap, l.overlap_ratio
        )?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            vocab_size: 30,
            d_model: 8,
            d_ffn: 12,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 6,
            ..Default::default()
        };
        Model::init(cfg, seed).unwrap()
    }

    #[test]
    fn self_drift_is_exactly_zero() {
        let m = tiny_model(1);
        let d = drift(&m, &m).unwrap();
        for l in &d.layers {
            assert_eq!(l.wasserstein_1d, 0.0);
            assert_eq!(l.cosine_mean, 1.0);
            assert_eq!(l.cosine_std, 0.0);
            assert_eq!(l.l2_mean, 0.0);
            assert_eq!(l.l2_std, 0.0);
        }
    }

    #[test]
    fn drift_localizes_to_the_touched_layer() {
        let m = tiny_model(2);
        let mut e = m.clone();
        let v = e.layers[1].w_out.get(0, 3) + 0.5;
        e.layers[1].w_out.set(0, 3, v);
        let d = drift(&m, &e).unwrap();
        assert_eq!(d.layers[0].l2_mean, 0.0);
        assert_eq!(d.layers[0].cosine_mean, 1.0);
        assert!(d.layers[1].l2_mean > 0.0);
    }

    #[test]
    fn drift_is_symmetric_in_distance() {
        let m = tiny_model(3);
        let mut e = m.clone();
        for c in 0..e.layers[0].w_out.cols {
            let v = e.layers[0].w_out.get(2, c) * 1.3 + 0.01;
            e.layers[0].w_out.set(2, c, v);
        }
        let ab = drift(&m, &e).unwrap();
        let ba = drift(&e, &m).unwrap();
        for (x, y) in ab.layers.iter().zip(&ba.layers) {
            assert!((x.wasserstein_1d - y.wasserstein_1d).abs() < 1e-12);
            assert!((x.l2_mean - y.l2_mean).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_columns_have_zero_cosine() {
        let m = tiny_model(4);
        let mut a = m.clone();
        let mut b = m.clone();
        for li in 0..a.layers.len() {
            a.layers[li].w_out.fill(0.0);
            b.layers[li].w_out.fill(0.0);
        }
        // Two columns rotated a quarter turn in the (row0, row1) plane.
        for c in 0..2 {
            a.layers[0].w_out.set(0, c, 1.0);
            b.layers[0].w_out.set(1, c, 1.0);
        }
        let d = drift(&a, &b).unwrap();
        // Untouched zero columns count as aligned; the two rotated ones as
        // orthogonal.
        let expected = (a.layers[0].w_out.cols - 2) as f64 / a.layers[0].w_out.cols as f64;
        assert!((d.layers[0].cosine_mean - expected).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = tiny_model(5);
        let cfg = ModelConfig {
            vocab_size: 30,
            d_model: 8,
            d_ffn: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 6,
            ..Default::default()
        };
        let b = Model::init(cfg, 5).unwrap();
        assert!(drift(&a, &b).is_err());
    }

    #[test]
    fn role_overlap_bounded_by_channel_counts() {
        use crate::attribution::AttributionMethod;
        let mat = AttributionMatrix {
            layer: 0,
            method: AttributionMethod::Lps,
            rows: 3,
            cols: 10,
            scores: (0..30).map(|i| ((i * 17 % 13) as f64 - 6.0) * 0.1).collect(),
        };
        let profile = role_profile(&[mat], &MaskingConfig::default()).unwrap();
        let l = &profile.layers[0];
        assert!(l.overlap <= l.general.min(l.specific));
        assert!((0.0..=1.0).contains(&l.overlap_ratio));
    }

    #[test]
    fn accounting_matches_hand_counts() {
        use crate::attribution::AttributionMethod;
        let mat = AttributionMatrix {
            layer: 2,
            method: AttributionMethod::Mpc,
            rows: 1,
            cols: 256,
            scores: vec![0.0; 256],
        };
        let acc = memory_accounting(&[mat]);
        assert_eq!(acc.layers[0].coeff_bytes, 1024);
        assert_eq!(acc.layers[0].bitset_bytes, 32);
        assert_eq!(acc.layers[0].nonzero_neurons, 0);
    }
}
