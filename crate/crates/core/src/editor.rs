//! Masked closed-form editing of `w_out`.
//!
//! One edit runs attribute -> mask -> solve target value -> closed-form
//! update. The update is solved inside the masked neuron subspace: the
//! key activation is restricted to selected neurons, the regularized
//! covariance system is solved there, and the solution is projected onto
//! the numerical null space of the preserved-key covariance so protected
//! directions stay untouched. Unselected `w_out` columns are never
//! written, which makes the column-zero guarantee exact rather than a
//! rounding statement.
//!
//! A batch applies one joint update: keys and residuals are stacked, the
//! mask comes from the pooled attribution matrix, and the per-layer delta
//! satisfies all batch keys simultaneously. A single edit is a batch of
//! one, same code path.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::attribution::{attribution_matrices, AttributionConfig};
use crate::error::{Error, Result};
use crate::masking::{mask_for, MaskMode, MaskingConfig, NeuronMask};
use crate::math::Mat;
use crate::model::{
    argmax, eval, tail_sub_backward, tail_sub_forward, EvalOpts, KvCache, Model,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditorConfig {
    pub edit_layers: Vec<usize>,
    pub solve_steps: usize,
    pub solve_lr: f32,
    /// Pull of the solved value toward the original FFN output.
    pub anchor_beta: f32,
    /// Logit margin of the new object over every other token at which the
    /// value solve stops early.
    pub solve_margin: f64,
    /// epsilon = epsilon_scale * trace(C) / d_ffn.
    pub epsilon_scale: f64,
    /// Eigenvalues below cutoff * lambda_max span the protected null space.
    pub null_cutoff: f64,
    /// Multiplier on the held-out key covariance. Below 1.0 the protected
    /// span is unchanged (the threshold is relative) but applied edit keys
    /// clear it more easily, and the ridge resists new edits less.
    pub preserve_weight: f64,
    /// Write repetitions per layer. Each bounded update closes part of the
    /// remaining residual; repeating converges toward the reachable target
    /// and stops early once the residual stalls.
    pub write_rounds: usize,
    /// Also constrain each request's paraphrase-surface keys to the solved
    /// value, so rewrites carry over to rephrased prompts.
    pub edit_paraphrase_keys: bool,
    /// Ablation switch: solve densely, zero unselected delta columns after.
    pub mask_after_solve: bool,
}

impl Default for EditorConfig {
    fn default() -> Self {
        EditorConfig {
            edit_layers: vec![2],
            solve_steps: 25,
            solve_lr: 0.5,
            anchor_beta: 0.05,
            solve_margin: 3.0,
            epsilon_scale: 1e-4,
            null_cutoff: 1e-4,
            preserve_weight: 1.0,
            write_rounds: 16,
            edit_paraphrase_keys: true,
            mask_after_solve: false,
        }
    }
}

/// Token-level edit instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSpec {
    pub prompt: Vec<u32>,
    pub old_object: u32,
    pub new_object: u32,
    pub paraphrases: Vec<Vec<u32>>,
}

impl EditSpec {
    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(Error::Schema("empty edit prompt".into()));
        }
        if self.old_object == self.new_object {
            return Err(Error::Schema("edit target equals the current object".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEditReport {
    pub layer: usize,
    pub popcount: usize,
    /// Columns the update actually wrote; everything else kept its bits.
    pub written_columns: Vec<u32>,
    /// l2 of (w_out + delta) k' - v_target over the batch, worst request.
    pub residual_l2: f64,
    pub residual_rel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub success: bool,
    /// Whether this request's key/value entered the joint update.
    pub applied: bool,
    pub log_odds_gain: f64,
    pub layers: Vec<LayerEditReport>,
    pub wall_ms: f64,
    pub error: Option<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub v_star: Vec<f32>,
    pub v_original: Vec<f32>,
    pub log_odds_gain: f64,
    pub steps_taken: usize,
}

/// Gradient-ascent solve for the value vector that makes the model emit
/// `new_object` after `prompt`, anchored to the layer's current FFN
/// output. Deterministic; no randomness involved.
pub fn solve_value_target(
    model: &Model,
    cache: &KvCache,
    ffn_output0: &[f32],
    layer: usize,
    old_object: u32,
    new_object: u32,
    cfg: &EditorConfig,
) -> Result<SolveResult> {
    let margin_ok = |logits: &[f32]| -> bool {
        let target = logits[new_object as usize];
        let best_other = logits
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != new_object as usize)
            .map(|(_, &v)| v)
            .fold(f32::NEG_INFINITY, f32::max);
        (target - best_other) as f64 >= cfg.solve_margin
    };
    let logp = |logits: &[f32], tok: u32| -> f64 {
        let lf: Vec<f64> = logits.iter().map(|&x| x as f64).collect();
        lf[tok as usize] - crate::math::log_sum_exp_f64(&lf)
    };

    let mut v = ffn_output0.to_vec();
    let (logits0, _) = tail_sub_forward(model, cache, layer, &v);
    let start_logp = logp(&logits0, new_object);
    // A prompt already answering with the new object needs no value
    // change; re-editing a landed fact is a no-op.
    if crate::model::argmax(&logits0) == new_object as usize {
        return Ok(SolveResult {
            v_star: v,
            v_original: ffn_output0.to_vec(),
            log_odds_gain: 0.0,
            steps_taken: 0,
        });
    }
    if cfg.solve_steps == 0 {
        return Err(Error::Numerical(
            "value solve given zero steps but the target is not yet dominant".into(),
        ));
    }

    let mut steps_taken = 0;
    let mut last_logits = logits0;
    for _ in 0..cfg.solve_steps {
        let (logits, tg) = tail_sub_forward(model, cache, layer, &v);
        if margin_ok(&logits) {
            last_logits = logits;
            break;
        }
        let lf: Vec<f64> = logits.iter().map(|&x| x as f64).collect();
        let lse = crate::math::log_sum_exp_f64(&lf);
        let mut dlogits = vec![0.0f32; logits.len()];
        for (i, dl) in dlogits.iter_mut().enumerate() {
            let p = (lf[i] - lse).exp();
            *dl = (if i == new_object as usize { 1.0 } else { 0.0 } - p) as f32;
        }
        let grad = tail_sub_backward(model, cache, &tg, &dlogits);
        for i in 0..v.len() {
            let anchor = 2.0 * cfg.anchor_beta * (v[i] - ffn_output0[i]);
            v[i] += cfg.solve_lr * (grad[i] - anchor);
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("value solve diverged".into()));
        }
        steps_taken += 1;
        last_logits = logits;
    }
    let (final_logits, _) = tail_sub_forward(model, cache, layer, &v);
    last_logits.copy_from_slice(&final_logits);
    let end_logp = logp(&last_logits, new_object);
    let gain = end_logp - start_logp;
    let beats_old = last_logits[new_object as usize] > last_logits[old_object as usize];
    if gain <= 0.0 || !beats_old {
        return Err(Error::Numerical(format!(
            "value solve failed: log-prob gain {gain:.4}, new-over-old {}",
            beats_old
        )));
    }
    Ok(SolveResult {
        v_star: v,
        v_original: ffn_output0.to_vec(),
        log_odds_gain: gain,
        steps_taken,
    })
}

struct LayerCov {
    layer: usize,
    /// Preserved key activations, one row per prompt (f32, diagnostics).
    k0: Mat,
    /// Covariance of preserved keys, f64.
    c0: DMatrix<f64>,
    /// Accumulated covariance of applied edit keys.
    c_edits: DMatrix<f64>,
}

pub struct Editor {
    pub config: EditorConfig,
    cov: Vec<LayerCov>,
}

impl Editor {
    /// Builds the preserved-key state by capturing activations for
    /// `preserve_prompts` at every edit layer of the current model.
    pub fn new(model: &Model, preserve_prompts: &[Vec<u32>], config: EditorConfig) -> Result<Editor> {
        for &l in &config.edit_layers {
            if l >= model.config.n_layers {
                return Err(Error::Config(format!("edit layer {l} out of range")));
            }
        }
        if config.edit_layers.is_empty() {
            return Err(Error::Config("no edit layers configured".into()));
        }
        let d_ffn = model.config.d_ffn;
        let mut cov: Vec<LayerCov> = config
            .edit_layers
            .iter()
            .map(|&layer| LayerCov {
                layer,
                k0: Mat::zeros(preserve_prompts.len(), d_ffn),
                c0: DMatrix::zeros(d_ffn, d_ffn),
                c_edits: DMatrix::zeros(d_ffn, d_ffn),
            })
            .collect();
        let opts = EvalOpts {
            capture_layers: &config.edit_layers,
            ..Default::default()
        };
        for (pi, prompt) in preserve_prompts.iter().enumerate() {
            let out = eval(model, prompt, &opts)?;
            for (cap, lc) in out.captures.iter().zip(cov.iter_mut()) {
                debug_assert_eq!(cap.layer, lc.layer);
                lc.k0.row_mut(pi).copy_from_slice(&cap.ffn_act);
                for a in 0..d_ffn {
                    let va = cap.ffn_act[a] as f64;
                    if va != 0.0 {
                        for b in 0..d_ffn {
                            lc.c0[(a, b)] += va * cap.ffn_act[b] as f64;
                        }
                    }
                }
            }
        }
        Ok(Editor { config, cov })
    }

    pub fn preserved_keys(&self, layer: usize) -> Option<&Mat> {
        self.cov.iter().find(|c| c.layer == layer).map(|c| &c.k0)
    }

    /// One edit; same path as a batch of one.
    pub fn apply_edit(
        &mut self,
        model: &Model,
        spec: &EditSpec,
        attr_cfg: &AttributionConfig,
        mask_cfg: &MaskingConfig,
    ) -> Result<(Model, EditOutcome)> {
        let (m, mut outcomes) = self.apply_batch(model, std::slice::from_ref(spec), attr_cfg, mask_cfg)?;
        Ok((m, outcomes.pop().expect("one outcome per request")))
    }

    /// Joint update for a batch of edits. Requests whose value solve fails
    /// are reported as failed and excluded; the rest share one delta per
    /// layer. Parameters outside the edit layers are never touched.
    pub fn apply_batch(
        &mut self,
        model: &Model,
        specs: &[EditSpec],
        attr_cfg: &AttributionConfig,
        mask_cfg: &MaskingConfig,
    ) -> Result<(Model, Vec<EditOutcome>)> {
        if specs.is_empty() {
            return Err(Error::Schema("empty edit batch".into()));
        }
        let t_start = std::time::Instant::now();
        for s in specs {
            s.validate()?;
        }
        let mut outcomes: Vec<EditOutcome> = specs
            .iter()
            .map(|_| EditOutcome {
                success: false,
                applied: false,
                log_odds_gain: 0.0,
                layers: Vec::new(),
                wall_ms: 0.0,
                error: None,
                warnings: Vec::new(),
            })
            .collect();

        let mut current = model.clone();
        let n_layers = self.config.edit_layers.len();
        let mut active: Vec<usize> = (0..specs.len()).collect();
        // Edit-key covariance contributions, committed only if the whole
        // step lands.
        let mut pending_cov: Vec<(usize, Vec<Vec<f32>>)> = Vec::new();

        // Masks come from attribution at the edit layers over the pooled
        // prompts (canonical plus paraphrases) of the batch, scored
        // against the old object on the unedited model.
        let mut attr_prompts: Vec<(Vec<u32>, u32)> = Vec::new();
        for s in specs {
            attr_prompts.push((s.prompt.clone(), s.old_object));
            for p in &s.paraphrases {
                attr_prompts.push((p.clone(), s.old_object));
            }
        }
        let attr_at_edit = AttributionConfig {
            layers: self.config.edit_layers.clone(),
            ..attr_cfg.clone()
        };
        let mats = attribution_matrices(&current, &attr_prompts, &attr_at_edit)?;
        let masks: Vec<NeuronMask> = mats
            .iter()
            .map(|m| mask_for(m, mask_cfg))
            .collect::<Result<_>>()?;

        for (li, &layer) in self.config.edit_layers.clone().iter().enumerate() {
            let n_rem = (n_layers - li) as f32;
            let mask = &masks[li];
            if active.is_empty() {
                break;
            }

            // Capture keys and solve per-request value targets on the
            // current weights.
            let mut keys: Vec<Vec<f32>> = Vec::new();
            let mut targets: Vec<Vec<f32>> = Vec::new();
            let mut solved: Vec<usize> = Vec::new();
            let opts = EvalOpts {
                capture_layers: std::slice::from_ref(&layer),
                want_cache: true,
                ..Default::default()
            };
            for &si in &active {
                let spec = &specs[si];
                let mut surfaces: Vec<&[u32]> = vec![&spec.prompt];
                if self.config.edit_paraphrase_keys {
                    surfaces.extend(spec.paraphrases.iter().map(Vec::as_slice));
                }
                let mut spec_keys: Vec<Vec<f32>> = Vec::new();
                let mut spec_targets: Vec<Vec<f32>> = Vec::new();
                let mut canonical_ok = false;
                for (surf_i, ids) in surfaces.iter().enumerate() {
                    let out = eval(&current, ids, &opts)?;
                    let cap = &out.captures[0];
                    let cache = out.cache.as_ref().expect("cache requested");
                    let mut ffn_out0 = vec![0.0f32; current.config.d_model];
                    for i in 0..ffn_out0.len() {
                        ffn_out0[i] = cap.ffn_output[i] - cap.ffn_input[i];
                    }
                    match solve_value_target(
                        &current,
                        cache,
                        &ffn_out0,
                        layer,
                        spec.old_object,
                        spec.new_object,
                        &self.config,
                    ) {
                        Ok(sr) => {
                            let mut target = vec![0.0f32; ffn_out0.len()];
                            for i in 0..target.len() {
                                target[i] = ffn_out0[i] + (sr.v_star[i] - ffn_out0[i]) / n_rem;
                            }
                            if surf_i == 0 {
                                outcomes[si].log_odds_gain = sr.log_odds_gain;
                                canonical_ok = true;
                            }
                            spec_keys.push(cap.ffn_act.clone());
                            spec_targets.push(target);
                        }
                        Err(e) => {
                            if surf_i == 0 {
                                outcomes[si].error = Some(format!("solve@layer{layer}: {e}"));
                                break;
                            }
                            outcomes[si]
                                .warnings
                                .push(format!("paraphrase {surf_i} solve skipped: {e}"));
                        }
                    }
                }
                if canonical_ok {
                    keys.extend(spec_keys);
                    targets.extend(spec_targets);
                    solved.push(si);
                }
            }
            active = solved;
            if active.is_empty() {
                break;
            }

            let lc_idx = self
                .cov
                .iter()
                .position(|c| c.layer == layer)
                .expect("covariance tracked for every edit layer");
            let mut warnings = Vec::new();
            // Editing w_out does not move this layer's own activations, so
            // keys and the solved target stay valid across rounds; each
            // round re-solves only the residual the bounded update left.
            let mut written: Vec<u32> = Vec::new();
            let mut worst_abs = 0.0f64;
            let mut worst_rel = f64::INFINITY;
            let mut round_err: Option<Error> = None;
            for _ in 0..self.config.write_rounds.max(1) {
                let delta_sel = {
                    let lc = &self.cov[lc_idx];
                    masked_delta(
                        &current.layers[layer].w_out,
                        &keys,
                        &targets,
                        mask,
                        lc,
                        &self.config,
                        &mut warnings,
                    )
                };
                let (delta, sel) = match delta_sel {
                    Ok(ds) => ds,
                    Err(e) => {
                        round_err = Some(e);
                        break;
                    }
                };

                // Write only selected columns; everything else keeps its
                // bits.
                let w_out = &mut current.layers[layer].w_out;
                for r in 0..w_out.rows {
                    for &c in &sel {
                        let v = w_out.get(r, c) + delta.get(r, c);
                        w_out.set(r, c, v);
                    }
                }
                for &c in &sel {
                    let cu = c as u32;
                    if !written.contains(&cu) {
                        written.push(cu);
                    }
                }

                // Residual check against the full activation.
                let d_model = current.config.d_model;
                let mut abs = 0.0f64;
                let mut rel = 0.0f64;
                for (k, target) in keys.iter().zip(&targets) {
                    let mut vnorm = 0.0f64;
                    let mut rnorm = 0.0f64;
                    for r in 0..d_model {
                        let got = crate::math::dot(current.layers[layer].w_out.row(r), k);
                        let want = target[r];
                        rnorm += ((got - want) as f64).powi(2);
                        vnorm += (want as f64).powi(2);
                    }
                    let a = rnorm.sqrt();
                    abs = abs.max(a);
                    rel = rel.max(a / vnorm.sqrt().max(1e-12));
                }
                let stalled = rel >= worst_rel * 0.95;
                worst_abs = abs;
                worst_rel = rel;
                if rel <= 1e-6 || stalled {
                    break;
                }
            }
            // An unsolvable layer (empty mask, collapsed directions) fails
            // the whole step: roll back any earlier writes so a failed
            // edit leaves the checkpoint untouched.
            if let Some(e) = round_err {
                for &si in &active {
                    outcomes[si].error = Some(format!("update@layer{layer}: {e}"));
                    outcomes[si].warnings.extend(warnings.iter().cloned());
                    outcomes[si].layers.clear();
                }
                active.clear();
                current = model.clone();
                pending_cov.clear();
                break;
            }
            written.sort_unstable();
            for &si in &active {
                outcomes[si].layers.push(LayerEditReport {
                    layer,
                    popcount: mask.popcount(),
                    written_columns: written.clone(),
                    residual_l2: worst_abs,
                    residual_rel: worst_rel,
                });
                outcomes[si].warnings.extend(warnings.iter().cloned());
            }
            pending_cov.push((lc_idx, keys));
        }

        // Applied edit keys join the covariance so later edits avoid them.
        for (lc_idx, keys) in pending_cov {
            let lc = &mut self.cov[lc_idx];
            let d_ffn = lc.c_edits.nrows();
            for k in &keys {
                for a in 0..d_ffn {
                    let va = k[a] as f64;
                    if va != 0.0 {
                        for b in 0..d_ffn {
                            lc.c_edits[(a, b)] += va * k[b] as f64;
                        }
                    }
                }
            }
        }

        let wall_ms = t_start.elapsed().as_secs_f64() * 1e3;
        for (si, outcome) in outcomes.iter_mut().enumerate() {
            outcome.wall_ms = wall_ms;
            outcome.applied = active.contains(&si);
            if outcome.applied {
                let logits = crate::model::logits_for(&current, &specs[si].prompt)?;
                outcome.success = argmax(&logits) == specs[si].new_object as usize;
            }
        }
        Ok((current, outcomes))
    }
}

/// Closed-form masked update for one layer over a batch.
///
/// Returns the delta (zero outside selected columns) and the selected
/// column indices. `keys` are full activations; the solve restricts them
/// to the mask.
fn masked_delta(
    w_out: &Mat,
    keys: &[Vec<f32>],
    targets: &[Vec<f32>],
    mask: &NeuronMask,
    lc: &LayerCov,
    cfg: &EditorConfig,
    warnings: &mut Vec<String>,
) -> Result<(Mat, Vec<usize>)> {
    let d_ffn = w_out.cols;
    let d_model = w_out.rows;
    let b = keys.len();
    let sel: Vec<usize> = if cfg.mask_after_solve {
        (0..d_ffn).collect()
    } else {
        mask.selected_indices()
    };
    if mask.popcount() == 0 {
        return Err(Error::Numerical("mask selects no neurons".into()));
    }
    let s = sel.len();

    // Residuals against the full activation, so the updated layer maps
    // each full key exactly onto its target.
    let mut r = DMatrix::<f64>::zeros(d_model, b);
    for (j, (k, target)) in keys.iter().zip(targets).enumerate() {
        for row in 0..d_model {
            let wk = crate::math::dot(w_out.row(row), k) as f64;
            r[(row, j)] = target[row] as f64 - wk;
        }
    }

    // Subspace covariance system (C + eps I) z = k.
    let pw = cfg.preserve_weight;
    let full_c_trace: f64 = (0..d_ffn)
        .map(|i| pw * lc.c0[(i, i)] + lc.c_edits[(i, i)])
        .sum();
    let mut eps = cfg.epsilon_scale * full_c_trace / d_ffn as f64;
    if eps <= 0.0 {
        eps = cfg.epsilon_scale.max(1e-12);
    }
    let mut c0_ss = DMatrix::<f64>::zeros(s, s);
    let mut c_ss = DMatrix::<f64>::zeros(s, s);
    for (ai, &a) in sel.iter().enumerate() {
        for (bi, &bb) in sel.iter().enumerate() {
            let base = pw * lc.c0[(a, bb)];
            c0_ss[(ai, bi)] = base;
            c_ss[(ai, bi)] = base + lc.c_edits[(a, bb)];
        }
    }
    // Both held-out keys and previously applied edit keys are protected;
    // without the applied keys in the projection, repeated bounded writes
    // of later edits walk over earlier ones.
    let protect_ss = c_ss.clone();
    let mut k_s = DMatrix::<f64>::zeros(s, b);
    for (j, k) in keys.iter().enumerate() {
        for (ai, &a) in sel.iter().enumerate() {
            k_s[(ai, j)] = k[a] as f64;
        }
    }

    // Ridge system with the batch keys inside the inverse: the update
    // stays bounded when a key is barely editable, and approaches exact
    // interpolation when the key has strong weakly-excited components.
    c_ss += &k_s * k_s.transpose();
    let mut chol = None;
    for attempt in 0..4 {
        let mut reg = c_ss.clone();
        for i in 0..s {
            reg[(i, i)] += eps;
        }
        match Cholesky::new(reg) {
            Some(c) => {
                chol = Some(c);
                break;
            }
            None => {
                eps *= 10.0;
                warnings.push(format!(
                    "covariance factorization failed, epsilon raised to {eps:.3e} (attempt {})",
                    attempt + 1
                ));
            }
        }
    }
    let chol = chol.ok_or_else(|| {
        Error::Numerical("regularized covariance is not positive definite".into())
    })?;
    let y = chol.solve(&k_s);
    let dense = &r * y.transpose();

    // Confine the update rows to the numerical null space of the
    // protected covariance on the subspace.
    let delta_s = match null_basis(&protect_ss, &c0_ss, cfg.null_cutoff)? {
        Some(u) => (&dense * &u) * u.transpose(),
        None => dense,
    };
    if delta_s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite update".into()));
    }

    let mut delta = Mat::zeros(d_model, d_ffn);
    let write_cols: &[usize] = &sel;
    for row in 0..d_model {
        for (ci, &c) in write_cols.iter().enumerate() {
            delta.set(row, c, delta_s[(row, ci)] as f32);
        }
    }

    // Post-solve masking arm zeroes the unselected columns of the dense
    // solution instead of restricting the solve.
    if cfg.mask_after_solve {
        for c in 0..d_ffn {
            if !mask.bits[c] {
                for row in 0..d_model {
                    delta.set(row, c, 0.0);
                }
            }
        }
    }
    if mask.mode == MaskMode::Soft {
        let weights = mask
            .soft_weights
            .as_ref()
            .ok_or_else(|| Error::Config("soft mask without weights".into()))?;
        for c in 0..d_ffn {
            let wgt = weights[c] as f32;
            if wgt != 1.0 {
                for row in 0..d_model {
                    delta.set(row, c, delta.get(row, c) * wgt);
                }
            }
        }
    }

    let final_sel: Vec<usize> = (0..d_ffn)
        .filter(|&c| (0..d_model).any(|r| delta.get(r, c) != 0.0))
        .collect();
    Ok((delta, final_sel))
}

/// Orthonormal basis of the span of eigenvectors of `protect` with
/// eigenvalues below `cutoff * lambda_max(base)`. The threshold is anchored
/// to the static preserved covariance so it does not climb as applied-edit
/// keys accumulate in `protect`; a climbing threshold would progressively
/// declassify preserved directions and let long edit streams erode them.
/// `None` means nothing is preserved (zero matrix), so no projection is
/// needed; an empty basis is an error since every direction would be
/// protected and no edit could move anything.
fn null_basis(
    protect: &DMatrix<f64>,
    base: &DMatrix<f64>,
    cutoff: f64,
) -> Result<Option<DMatrix<f64>>> {
    let s = protect.nrows();
    let eig = SymmetricEigen::new(protect.clone());
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if lmax <= 0.0 {
        return Ok(None);
    }
    let lmax_base = SymmetricEigen::new(base.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(0.0f64, f64::max);
    let thresh = cutoff * if lmax_base > 0.0 { lmax_base } else { lmax };
    let null_cols: Vec<usize> = (0..s)
        .filter(|&i| eig.eigenvalues[i] < thresh)
        .collect();
    if null_cols.is_empty() {
        return Err(Error::Numerical(
            "preserved covariance has no numerical null space in the selected subspace".into(),
        ));
    }
    let mut u = DMatrix::<f64>::zeros(s, null_cols.len());
    for (ci, &i) in null_cols.iter().enumerate() {
        u.set_column(ci, &eig.eigenvectors.column(i));
    }
    Ok(Some(u))
}

/// Frobenius-norm diagnostics for the locality of a delta against the
/// preserved keys: |delta . K0^T|_F / |delta|_F.
pub fn null_space_leakage(delta: &Mat, k0: &Mat) -> f64 {
    let mut num = 0.0f64;
    for p in 0..k0.rows {
        let k = k0.row(p);
        for r in 0..delta.rows {
            let v = crate::math::dot(delta.row(r), k) as f64;
            num += v * v;
        }
    }
    let den: f64 = delta.data.iter().map(|&v| (v as f64) * v as f64).sum();
    if den == 0.0 {
        return 0.0;
    }
    (num / den).sqrt()
}

pub fn write_outcomes_jsonl(outcomes: &[EditOutcome], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    for o in outcomes {
        let mut v = serde_json::to_value(o)?;
        v.as_object_mut()
            .expect("outcome serializes to an object")
            .insert("version".into(), serde_json::json!("outcome/v1"));
        serde_json::to_writer(&mut w, &v)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{EntropyStats, SelectionScores};
    use crate::model::ModelConfig;

    fn tiny_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            vocab_size: 40,
            d_model: 16,
            d_ffn: 24,
            n_layers: 3,
            n_heads: 2,
            max_seq_len: 8,
            ..Default::default()
        };
        Model::init(cfg, seed).unwrap()
    }

    fn all_ones_mask(d: usize) -> NeuronMask {
        NeuronMask {
            layer: 1,
            bits: vec![true; d],
            soft_weights: None,
            scores: SelectionScores {
                r_general: vec![0; d],
                r_specific: vec![0.0; d],
            },
            stats: EntropyStats {
                h_general: 1.0,
                h_specific: 1.0,
                alpha: 1.0,
                rho_general: 1.0,
                rho_specific: 1.0,
                a_ge: 0.5,
                b_ge: 0.3,
                a_sp: 0.5,
                b_sp: 0.3,
            },
            tau_general: 0.0,
            tau_specific: 0.0,
            mode: MaskMode::Union,
        }
    }

    fn empty_cov(d_ffn: usize) -> LayerCov {
        LayerCov {
            layer: 1,
            k0: Mat::zeros(0, d_ffn),
            c0: DMatrix::zeros(d_ffn, d_ffn),
            c_edits: DMatrix::zeros(d_ffn, d_ffn),
        }
    }

    #[test]
    fn full_mask_no_preserve_hits_target_exactly() {
        let m = tiny_model(3);
        let w_out = &m.layers[1].w_out;
        let d_ffn = m.config.d_ffn;
        let key: Vec<f32> = (0..d_ffn).map(|i| ((i * 7 % 13) as f32 - 6.0) * 0.1).collect();
        let target: Vec<f32> = (0..m.config.d_model).map(|i| (i as f32 - 8.0) * 0.05).collect();
        let mask = all_ones_mask(d_ffn);
        let cov = empty_cov(d_ffn);
        let mut warnings = Vec::new();
        let (delta, sel) = masked_delta(
            w_out,
            &[key.clone()],
            &[target.clone()],
            &mask,
            &cov,
            &EditorConfig::default(),
            &mut warnings,
        )
        .unwrap();
        assert!(!sel.is_empty());
        let mut out = vec![0.0f32; m.config.d_model];
        for r in 0..m.config.d_model {
            let mut s = crate::math::dot(w_out.row(r), &key);
            s += crate::math::dot(delta.row(r), &key);
            out[r] = s;
        }
        let rel: f64 = out
            .iter()
            .zip(&target)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt()
            / target.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!(rel < 1e-4, "relative residual {rel}");
    }

    #[test]
    fn unselected_columns_are_exactly_zero() {
        let m = tiny_model(5);
        let d_ffn = m.config.d_ffn;
        let mut mask = all_ones_mask(d_ffn);
        for i in 0..d_ffn {
            mask.bits[i] = i % 3 == 0;
        }
        let key: Vec<f32> = (0..d_ffn).map(|i| (i as f32 * 0.37).sin()).collect();
        let target: Vec<f32> = (0..m.config.d_model).map(|i| (i as f32 * 0.21).cos()).collect();
        let cov = empty_cov(d_ffn);
        let mut warnings = Vec::new();
        let (delta, _) = masked_delta(
            &m.layers[1].w_out,
            &[key],
            &[target],
            &mask,
            &cov,
            &EditorConfig::default(),
            &mut warnings,
        )
        .unwrap();
        for c in 0..d_ffn {
            if !mask.bits[c] {
                for r in 0..m.config.d_model {
                    assert_eq!(delta.get(r, c).to_bits(), 0f32.to_bits());
                }
            }
        }
    }

    #[test]
    fn empty_mask_is_rejected() {
        let m = tiny_model(7);
        let d_ffn = m.config.d_ffn;
        let mut mask = all_ones_mask(d_ffn);
        mask.bits.iter_mut().for_each(|b| *b = false);
        let cov = empty_cov(d_ffn);
        let mut warnings = Vec::new();
        let err = masked_delta(
            &m.layers[1].w_out,
            &[vec![0.1; d_ffn]],
            &[vec![0.1; m.config.d_model]],
            &mask,
            &cov,
            &EditorConfig::default(),
            &mut warnings,
        );
        assert!(err.is_err());
    }

    #[test]
    fn null_space_projection_protects_preserved_keys() {
        let m = tiny_model(11);
        let d_ffn = m.config.d_ffn;
        // Eight preserved directions in a 24-dim space leave a rich null
        // space; leakage through it should be tiny.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut cov = empty_cov(d_ffn);
        let n0 = 8;
        cov.k0 = Mat::zeros(n0, d_ffn);
        for p in 0..n0 {
            for i in 0..d_ffn {
                let v: f32 = rng.gen_range(-1.0..1.0);
                cov.k0.set(p, i, v);
            }
        }
        for p in 0..n0 {
            for a in 0..d_ffn {
                for b in 0..d_ffn {
                    cov.c0[(a, b)] += cov.k0.get(p, a) as f64 * cov.k0.get(p, b) as f64;
                }
            }
        }
        let key: Vec<f32> = (0..d_ffn).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let target: Vec<f32> = (0..m.config.d_model).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
        let mask = all_ones_mask(d_ffn);
        let mut warnings = Vec::new();
        let (delta, _) = masked_delta(
            &m.layers[1].w_out,
            &[key],
            &[target],
            &mask,
            &cov,
            &EditorConfig::default(),
            &mut warnings,
        )
        .unwrap();
        let leak = null_space_leakage(&delta, &cov.k0);
        assert!(leak <= 0.05, "leakage {leak}");
    }

    #[test]
    fn full_rank_preserved_covariance_blocks_editing() {
        let d = 6;
        let mut c0 = DMatrix::<f64>::zeros(d, d);
        for i in 0..d {
            c0[(i, i)] = 1.0;
        }
        assert!(null_basis(&c0, &c0, 1e-6).is_err());
    }

    #[test]
    fn apply_edit_flips_prediction_on_random_model() {
        let m = tiny_model(19);
        let preserve: Vec<Vec<u32>> = (0..10).map(|i| vec![i as u32, (i + 10) as u32, 3]).collect();
        let cfg = EditorConfig {
            edit_layers: vec![1],
            ..Default::default()
        };
        let mut editor = Editor::new(&m, &preserve, cfg).unwrap();
        let spec = EditSpec {
            prompt: vec![2, 15, 8],
            old_object: crate::model::argmax(&crate::model::logits_for(&m, &[2, 15, 8]).unwrap())
                as u32,
            new_object: 33,
            paraphrases: vec![vec![5, 2, 15, 8]],
        };
        let attr = AttributionConfig {
            layers: vec![1],
            ..Default::default()
        };
        let mask_cfg = MaskingConfig::default();
        let (edited, outcome) = editor.apply_edit(&m, &spec, &attr, &mask_cfg).unwrap();
        assert!(outcome.applied, "error: {:?}", outcome.error);
        assert!(outcome.success, "edit did not flip: {outcome:?}");
        let logits = crate::model::logits_for(&edited, &spec.prompt).unwrap();
        assert_eq!(argmax(&logits), 33);

        // Non-target layers bit-identical.
        for li in [0usize, 2] {
            assert_eq!(m.layers[li], edited.layers[li]);
        }
        assert_eq!(m.tok_embedding, edited.tok_embedding);
        assert_eq!(m.unembedding, edited.unembedding);
        // Within the target layer, only w_out moves.
        assert_eq!(m.layers[1].w_in, edited.layers[1].w_in);
        assert_eq!(m.layers[1].w_q, edited.layers[1].w_q);
    }

    #[test]
    fn batch_of_one_matches_single_edit_bitwise() {
        let m = tiny_model(23);
        let preserve: Vec<Vec<u32>> = (0..8).map(|i| vec![i as u32, 7, (i + 20) as u32]).collect();
        let cfg = EditorConfig {
            edit_layers: vec![1],
            ..Default::default()
        };
        let spec = EditSpec {
            prompt: vec![9, 4, 31],
            old_object: argmax(&crate::model::logits_for(&m, &[9, 4, 31]).unwrap()) as u32,
            new_object: 12,
            paraphrases: vec![],
        };
        let attr = AttributionConfig {
            layers: vec![1],
            ..Default::default()
        };
        let mask_cfg = MaskingConfig::default();
        let mut e1 = Editor::new(&m, &preserve, cfg.clone()).unwrap();
        let mut e2 = Editor::new(&m, &preserve, cfg).unwrap();
        let (m1, o1) = e1.apply_edit(&m, &spec, &attr, &mask_cfg).unwrap();
        let (m2, o2) = e2
            .apply_batch(&m, std::slice::from_ref(&spec), &attr, &mask_cfg)
            .map(|(m, mut os)| (m, os.pop().unwrap()))
            .unwrap();
        assert_eq!(m1, m2);
        assert_eq!(o1.success, o2.success);
        assert_eq!(o1.layers, o2.layers);
    }

    #[test]
    fn repeat_edit_residual_does_not_grow() {
        let m = tiny_model(29);
        let preserve: Vec<Vec<u32>> = (0..6).map(|i| vec![(i + 1) as u32, 2]).collect();
        let cfg = EditorConfig {
            edit_layers: vec![1],
            ..Default::default()
        };
        let mut editor = Editor::new(&m, &preserve, cfg).unwrap();
        let spec = EditSpec {
            prompt: vec![6, 18],
            old_object: argmax(&crate::model::logits_for(&m, &[6, 18]).unwrap()) as u32,
            new_object: 25,
            paraphrases: vec![],
        };
        let attr = AttributionConfig {
            layers: vec![1],
            ..Default::default()
        };
        let mask_cfg = MaskingConfig::default();
        let (m1, o1) = editor.apply_edit(&m, &spec, &attr, &mask_cfg).unwrap();
        assert!(o1.success);
        let (_, o2) = editor.apply_edit(&m1, &spec, &attr, &mask_cfg).unwrap();
        let r1 = o1.layers[0].residual_l2;
        let r2 = o2.layers[0].residual_l2;
        assert!(r2 <= r1 + 1e-6, "first {r1}, second {r2}");
    }

    #[test]
    fn empty_batch_is_rejected() {
        let m = tiny_model(31);
        let mut editor = Editor::new(&m, &[vec![1, 2]], EditorConfig::default()).unwrap();
        let attr = AttributionConfig::default();
        assert!(editor
            .apply_batch(&m, &[], &attr, &MaskingConfig::default())
            .is_err());
    }
}
