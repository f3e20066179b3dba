//! Lifelong-editing experiment loop: applies an edit stream in batches,
//! evaluates reliability, generalization, and locality cumulatively at
//! configured horizons, and tracks drift against the base checkpoint.
//!
//! Identical inputs (checkpoint, stream, config) give byte-identical
//! reports once timing fields are stripped; `canonical_report_json` does
//! the stripping.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{attribution_matrices, AttributionConfig, AttributionMethod};
use crate::corpus::{EditRequest, FactWorld};
use crate::diagnostics::{drift, DriftStats};
use crate::editor::{EditOutcome, EditSpec, Editor, EditorConfig};
use crate::error::{Error, Result};
use crate::masking::{MaskMode, MaskingConfig};
use crate::model::{argmax, logits_for, AblationSpec, EvalOpts, Model, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPolicy {
    AtHorizons,
    FinalOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub horizons: Vec<usize>,
    pub batch_size: usize,
    pub eval_policy: EvalPolicy,
    pub seed: u64,
    /// Held-out prompts whose key activations the editor protects.
    pub n_preserve: usize,
    /// Re-check the editor's write-locality guarantees after every step.
    pub online_verify: bool,
    pub editor: EditorConfig,
    pub attribution: AttributionConfig,
    pub masking: MaskingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            horizons: vec![10, 100, 200],
            batch_size: 1,
            eval_policy: EvalPolicy::AtHorizons,
            seed: 7,
            n_preserve: 1000,
            online_verify: false,
            editor: EditorConfig::default(),
            attribution: AttributionConfig::default(),
            masking: MaskingConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.eval_policy == EvalPolicy::AtHorizons {
            if self.horizons.is_empty() {
                return Err(Error::Config("no horizons configured".into()));
            }
            if self.horizons.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config("horizons must be strictly increasing".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonRecord {
    pub horizon: usize,
    pub edits_applied: usize,
    /// None until at least one edit has been attempted.
    pub rel: Option<f64>,
    pub gen: Option<f64>,
    pub loc: f64,
    pub general_probe_accuracy: f64,
    pub drift: DriftStats,
    pub mean_step_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub world_seed: u64,
    pub run_seed: u64,
    pub engine_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRunReport {
    pub horizons: Vec<HorizonRecord>,
    pub n_edits: usize,
    pub n_success: usize,
    pub n_failed: usize,
    pub provenance: Provenance,
    pub total_wall_s: f64,
}

pub struct RunOutput {
    pub report: EditRunReport,
    pub outcomes: Vec<EditOutcome>,
    pub model: Model,
}

struct EncodedRequest {
    spec: EditSpec,
    paraphrases: Vec<Vec<u32>>,
}

struct EvalSets {
    /// Dedup'd locality probes over the whole stream.
    probes: Vec<(Vec<u32>, u32)>,
    /// Canonical prompts of facts the stream never edits.
    untouched: Vec<(Vec<u32>, u32)>,
}

/// Token-level form of one edit request.
pub fn encode_request(tok: &Tokenizer, r: &EditRequest) -> Result<EditSpec> {
    Ok(EditSpec {
        prompt: tok.encode(&r.prompt)?,
        old_object: tok.id(&r.target_old)?,
        new_object: tok.id(&r.target_new)?,
        paraphrases: r.paraphrases.iter().map(|p| tok.encode(p)).collect::<Result<_>>()?,
    })
}

/// Canonical prompts of facts no request in `stream` edits, cycled up to
/// `n` entries; the editor protects their key activations.
pub fn preserve_prompts(
    world: &FactWorld,
    tok: &Tokenizer,
    stream: &[EditRequest],
    n: usize,
) -> Result<Vec<Vec<u32>>> {
    let edited: std::collections::HashSet<&str> =
        stream.iter().map(|r| r.prompt.as_str()).collect();
    let mut untouched = Vec::new();
    for fact in &world.facts {
        let prompt = world.canonical_prompt(fact);
        if !edited.contains(prompt.as_str()) {
            untouched.push(tok.encode(&prompt)?);
        }
    }
    if untouched.is_empty() && n > 0 {
        return Err(Error::Config("no untouched facts left to preserve".into()));
    }
    Ok((0..n).map(|i| untouched[i % untouched.len()].clone()).collect())
}

fn encode_stream(tok: &Tokenizer, stream: &[EditRequest]) -> Result<Vec<EncodedRequest>> {
    stream
        .iter()
        .map(|r| {
            let spec = encode_request(tok, r)?;
            let paraphrases = spec.paraphrases.clone();
            Ok(EncodedRequest { spec, paraphrases })
        })
        .collect()
}

fn build_eval_sets(
    world: &FactWorld,
    tok: &Tokenizer,
    stream: &[EditRequest],
) -> Result<EvalSets> {
    let mut probes = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for r in stream {
        for p in &r.locality {
            if seen.insert(p.prompt.clone()) {
                probes.push((tok.encode(&p.prompt)?, tok.id(&p.expected)?));
            }
        }
    }
    let edited: std::collections::HashSet<&str> =
        stream.iter().map(|r| r.prompt.as_str()).collect();
    let mut untouched = Vec::new();
    for fact in &world.facts {
        let prompt = world.canonical_prompt(fact);
        if !edited.contains(prompt.as_str()) {
            untouched.push((tok.encode(&prompt)?, tok.id(world.object_word(fact))?));
        }
    }
    Ok(EvalSets { probes, untouched })
}

fn fraction_correct(model: &Model, cases: &[(Vec<u32>, u32)]) -> Result<Option<f64>> {
    if cases.is_empty() {
        return Ok(None);
    }
    let hits: usize = cases
        .par_iter()
        .map(|(ids, want)| {
            logits_for(model, ids).map(|l| usize::from(argmax(&l) == *want as usize))
        })
        .try_reduce(|| 0usize, |a, b| Ok(a + b))?;
    Ok(Some(hits as f64 / cases.len() as f64))
}

fn evaluate(
    model: &Model,
    base: &Model,
    edited: &[EncodedRequest],
    sets: &EvalSets,
    horizon: usize,
    mean_step_time_s: f64,
) -> Result<HorizonRecord> {
    let rel_cases: Vec<(Vec<u32>, u32)> = edited
        .iter()
        .map(|r| (r.spec.prompt.clone(), r.spec.new_object))
        .collect();
    let gen_cases: Vec<(Vec<u32>, u32)> = edited
        .iter()
        .flat_map(|r| r.paraphrases.iter().map(|p| (p.clone(), r.spec.new_object)))
        .collect();
    let rel = fraction_correct(model, &rel_cases)?;
    let gen = fraction_correct(model, &gen_cases)?;
    let loc = fraction_correct(model, &sets.probes)?.unwrap_or(0.0);
    let gpa = fraction_correct(model, &sets.untouched)?.unwrap_or(0.0);
    Ok(HorizonRecord {
        horizon,
        edits_applied: edited.len(),
        rel,
        gen,
        loc,
        general_probe_accuracy: gpa,
        drift: drift(base, model)?,
        mean_step_time_s,
    })
}

/// Checks that a step wrote nothing outside its reported columns on the
/// edit layers and nothing at all anywhere else.
fn verify_step(
    before: &Model,
    after: &Model,
    edit_layers: &[usize],
    outcomes: &[EditOutcome],
) -> Result<()> {
    let written: std::collections::HashMap<usize, &[u32]> = outcomes
        .iter()
        .find(|o| o.applied)
        .map(|o| {
            o.layers
                .iter()
                .map(|l| (l.layer, l.written_columns.as_slice()))
                .collect()
        })
        .unwrap_or_default();
    if before.tok_embedding != after.tok_embedding
        || before.pos_embedding != after.pos_embedding
        || before.unembedding != after.unembedding
        || before.ln_f != after.ln_f
    {
        return Err(Error::Numerical("edit touched weights outside the layers".into()));
    }
    for (li, (bl, al)) in before.layers.iter().zip(&after.layers).enumerate() {
        let is_edit_layer = edit_layers.contains(&li);
        if !is_edit_layer {
            if bl != al {
                return Err(Error::Numerical(format!("non-target layer {li} changed")));
            }
            continue;
        }
        if bl.ln1 != al.ln1
            || bl.w_q != al.w_q
            || bl.w_k != al.w_k
            || bl.w_v != al.w_v
            || bl.w_o != al.w_o
            || bl.w_in != al.w_in
        {
            return Err(Error::Numerical(format!(
                "edit touched non-value weights in layer {li}"
            )));
        }
        let allowed = written.get(&li).copied().unwrap_or(&[]);
        for c in 0..bl.w_out.cols {
            if allowed.contains(&(c as u32)) {
                continue;
            }
            for r in 0..bl.w_out.rows {
                if bl.w_out.get(r, c).to_bits() != al.w_out.get(r, c).to_bits() {
                    return Err(Error::Numerical(format!(
                        "unselected column {c} of layer {li} changed"
                    )));
                }
            }
        }
    }
    Ok(())
}

pub fn config_hash(cfg: &RunConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(&bytes);
    format!("{:x}", h.finalize())
}

/// Applies the stream in consecutive batches and evaluates cumulatively.
/// Failed steps stay in the metric denominators; the run keeps going.
pub fn run_batched(
    model: &Model,
    world: &FactWorld,
    stream: &[EditRequest],
    cfg: &RunConfig,
) -> Result<RunOutput> {
    cfg.validate()?;
    let max_horizon = match cfg.eval_policy {
        EvalPolicy::AtHorizons => *cfg.horizons.last().expect("validated nonempty"),
        EvalPolicy::FinalOnly => stream.len(),
    };
    if stream.len() < max_horizon {
        return Err(Error::Config(format!(
            "stream has {} edits but the last horizon needs {max_horizon}",
            stream.len()
        )));
    }
    let tok = world.tokenizer()?;
    let encoded = encode_stream(&tok, stream)?;
    let sets = build_eval_sets(world, &tok, stream)?;

    // Preserved keys come from never-edited canonical prompts, cycled if
    // the pool is smaller than requested.
    if sets.untouched.is_empty() && cfg.n_preserve > 0 {
        return Err(Error::Config("no untouched facts left to preserve".into()));
    }
    let preserve: Vec<Vec<u32>> = (0..cfg.n_preserve)
        .map(|i| sets.untouched[i % sets.untouched.len()].0.clone())
        .collect();
    let mut editor = Editor::new(model, &preserve, cfg.editor.clone())?;

    let t_run = std::time::Instant::now();
    let mut current = model.clone();
    let mut outcomes: Vec<EditOutcome> = Vec::with_capacity(stream.len());
    let mut records: Vec<HorizonRecord> = Vec::new();
    let mut horizon_iter = cfg.horizons.iter().copied().peekable();
    let mut edit_wall_s = 0.0f64;

    let mut done = 0usize;
    while done < max_horizon {
        let take = cfg.batch_size.min(max_horizon - done);
        let batch: Vec<EditSpec> = encoded[done..done + take]
            .iter()
            .map(|r| r.spec.clone())
            .collect();
        let t_step = std::time::Instant::now();
        let (next, batch_outcomes) =
            editor.apply_batch(&current, &batch, &cfg.attribution, &cfg.masking)?;
        edit_wall_s += t_step.elapsed().as_secs_f64();
        if cfg.online_verify {
            verify_step(&current, &next, &cfg.editor.edit_layers, &batch_outcomes)?;
        }
        current = next;
        outcomes.extend(batch_outcomes);
        done += take;

        if cfg.eval_policy == EvalPolicy::AtHorizons {
            while let Some(&h) = horizon_iter.peek() {
                if done < h {
                    break;
                }
                horizon_iter.next();
                let mean_step = edit_wall_s / done as f64;
                records.push(evaluate(&current, model, &encoded[..done], &sets, h, mean_step)?);
            }
        }
    }
    if cfg.eval_policy == EvalPolicy::FinalOnly {
        let mean_step = edit_wall_s / done.max(1) as f64;
        records.push(evaluate(&current, model, &encoded[..done], &sets, done, mean_step)?);
    }

    let n_success = outcomes.iter().filter(|o| o.success).count();
    let report = EditRunReport {
        horizons: records,
        n_edits: done,
        n_success,
        n_failed: done - n_success,
        provenance: Provenance {
            config_hash: config_hash(cfg),
            world_seed: world.config.seed,
            run_seed: cfg.seed,
            engine_version: env!("CARGO_PKG_VERSION").to_string(),
        },
        total_wall_s: t_run.elapsed().as_secs_f64(),
    };
    Ok(RunOutput { report, outcomes, model: current })
}

/// Batch size one, same engine.
pub fn run_sequential(
    model: &Model,
    world: &FactWorld,
    stream: &[EditRequest],
    cfg: &RunConfig,
) -> Result<RunOutput> {
    let cfg = RunConfig { batch_size: 1, ..cfg.clone() };
    run_batched(model, world, stream, &cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    pub report: EditRunReport,
}

/// Runs the six selection strategies on identical streams and seeds from
/// the same base checkpoint.
pub fn ablation_mask_modes(
    model: &Model,
    world: &FactWorld,
    stream: &[EditRequest],
    base: &RunConfig,
    fixed_rho: f64,
) -> Result<Vec<AblationArm>> {
    if !(0.0..=1.0).contains(&fixed_rho) {
        return Err(Error::Config("fixed ratio must lie in [0,1]".into()));
    }
    let arms: Vec<(&str, MaskingConfig)> = vec![
        ("general_only", MaskingConfig { mode: MaskMode::GeneralOnly, ..base.masking.clone() }),
        ("specific_only", MaskingConfig { mode: MaskMode::SpecificOnly, ..base.masking.clone() }),
        (
            "union_fixed",
            MaskingConfig {
                mode: MaskMode::Union,
                a_general: 0.0,
                b_general: fixed_rho,
                a_specific: 0.0,
                b_specific: fixed_rho,
                ..base.masking.clone()
            },
        ),
        ("union_dynamic", MaskingConfig { mode: MaskMode::Union, ..base.masking.clone() }),
        ("overlap_only", MaskingConfig { mode: MaskMode::OverlapOnly, ..base.masking.clone() }),
        ("non_overlap_only", MaskingConfig { mode: MaskMode::NonOverlapOnly, ..base.masking.clone() }),
    ];
    let mut out = Vec::with_capacity(arms.len());
    for (name, masking) in arms {
        let cfg = RunConfig { masking, ..base.clone() };
        let run = run_batched(model, world, stream, &cfg)?;
        out.push(AblationArm { name: name.to_string(), report: run.report });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleAblationEntry {
    pub class: String,
    pub k: usize,
    /// Task whose accuracy is being measured.
    pub task: usize,
    pub acc_before: f64,
    pub acc_after: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleAblationReport {
    pub layer: usize,
    pub n_tasks: usize,
    pub general_count: usize,
    pub specific_counts: Vec<usize>,
    pub entries: Vec<RoleAblationEntry>,
}

/// Splits the relations into two families as probe tasks, classifies
/// neurons by the sign pattern of their mean attribution across tasks,
/// and measures per-task accuracy after zeroing the top-k of each class.
pub fn neuron_role_ablation(
    model: &Model,
    world: &FactWorld,
    layer: usize,
    top_ks: &[usize],
    attr_cfg: &AttributionConfig,
    max_prompts_per_task: usize,
) -> Result<RoleAblationReport> {
    let d_ffn = model.config.d_ffn;
    if let Some(&k) = top_ks.iter().find(|&&k| k > d_ffn) {
        return Err(Error::Config(format!("top-k {k} exceeds {d_ffn} neurons")));
    }
    if world.relations.len() < 2 {
        return Err(Error::Config("need at least two relations to form tasks".into()));
    }
    if layer >= model.config.n_layers {
        return Err(Error::Config(format!("layer {layer} out of range")));
    }
    let tok = world.tokenizer()?;
    let split = world.relations.len() / 2;
    let mut tasks: Vec<Vec<(Vec<u32>, u32)>> = vec![Vec::new(), Vec::new()];
    for fact in &world.facts {
        let t = usize::from(fact.relation >= split);
        if tasks[t].len() < max_prompts_per_task {
            tasks[t].push((
                tok.encode(&world.canonical_prompt(fact))?,
                tok.id(world.object_word(fact))?,
            ));
        }
    }
    if tasks.iter().any(|t| t.is_empty()) {
        return Err(Error::Config("a probe task has no facts".into()));
    }

    // Mean attribution per neuron per task.
    let cfg = AttributionConfig { layers: vec![layer], ..attr_cfg.clone() };
    let mut task_scores: Vec<Vec<f64>> = Vec::with_capacity(tasks.len());
    for task in &tasks {
        let mut sums = vec![0.0f64; d_ffn];
        for (ids, target) in task {
            let per_layer = crate::attribution::score_prompt(model, ids, *target, &cfg)?;
            for (s, v) in sums.iter_mut().zip(&per_layer[0]) {
                *s += v;
            }
        }
        for s in sums.iter_mut() {
            *s /= task.len() as f64;
        }
        task_scores.push(sums);
    }

    let positive_on = |i: usize| -> Vec<bool> {
        task_scores.iter().map(|s| s[i] > 0.0).collect()
    };
    let mut general: Vec<usize> = Vec::new();
    let mut specific: Vec<Vec<usize>> = vec![Vec::new(); tasks.len()];
    for i in 0..d_ffn {
        let pos = positive_on(i);
        if pos.iter().all(|&p| p) {
            general.push(i);
        } else if pos.iter().filter(|&&p| p).count() == 1 {
            let t = pos.iter().position(|&p| p).expect("one positive task");
            specific[t].push(i);
        }
    }
    let mean_across = |i: usize| -> f64 {
        task_scores.iter().map(|s| s[i]).sum::<f64>() / task_scores.len() as f64
    };
    general.sort_by(|&a, &b| mean_across(b).total_cmp(&mean_across(a)).then(a.cmp(&b)));
    for (t, list) in specific.iter_mut().enumerate() {
        list.sort_by(|&a, &b| {
            task_scores[t][b].total_cmp(&task_scores[t][a]).then(a.cmp(&b))
        });
    }

    let accuracy = |ablate: Option<&AblationSpec>, task: &[(Vec<u32>, u32)]| -> Result<f64> {
        let mut hits = 0usize;
        for (ids, want) in task {
            let opts = EvalOpts { ablation: ablate, ..Default::default() };
            let out = crate::model::eval(model, ids, &opts)?;
            hits += usize::from(argmax(&out.logits) == *want as usize);
        }
        Ok(hits as f64 / task.len() as f64)
    };
    let base_acc: Vec<f64> = tasks
        .iter()
        .map(|t| accuracy(None, t))
        .collect::<Result<_>>()?;

    let mut entries = Vec::new();
    let mut class_sets: Vec<(String, &[usize])> = vec![("general".into(), &general)];
    for (t, list) in specific.iter().enumerate() {
        class_sets.push((format!("task{t}_specific"), list));
    }
    for &k in top_ks {
        for (class, ranked) in &class_sets {
            let chosen: Vec<usize> = ranked.iter().copied().take(k).collect();
            let spec = AblationSpec { by_layer: vec![(layer, chosen)] };
            for (t, task) in tasks.iter().enumerate() {
                let after = if k == 0 {
                    base_acc[t]
                } else {
                    accuracy(Some(&spec), task)?
                };
                entries.push(RoleAblationEntry {
                    class: class.clone(),
                    k,
                    task: t,
                    acc_before: base_acc[t],
                    acc_after: after,
                    delta: after - base_acc[t],
                });
            }
        }
    }
    Ok(RoleAblationReport {
        layer,
        n_tasks: tasks.len(),
        general_count: general.len(),
        specific_counts: specific.iter().map(Vec::len).collect(),
        entries,
    })
}

fn strip_timing(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            map.remove("mean_step_time_s");
            map.remove("total_wall_s");
            map.remove("wall_ms");
            map.remove("mean_per_edit_s");
            for m in map.values_mut() {
                strip_timing(m);
            }
        }
        serde_json::Value::Array(items) => {
            for m in items.iter_mut() {
                strip_timing(m);
            }
        }
        _ => {}
    }
}

/// Report serialization with every timing field removed; what remains is
/// byte-stable across reruns of the same inputs.
pub fn canonical_report_json(report: &EditRunReport) -> Result<String> {
    canonical_json(report)
}

/// Same timing-stripped serialization for any report-shaped value.
pub fn canonical_json<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    strip_timing(&mut v);
    Ok(serde_json::to_string_pretty(&v)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyTiming {
    pub strategy: String,
    pub n_edits: usize,
    pub reps: usize,
    pub mean_per_edit_s: f64,
}

/// Wall-clock attribution cost per edit for each scoring strategy over
/// identical prompt sets. Rounds interleave the strategies so machine
/// load drift hits all of them alike; the first round warms up and is
/// discarded.
pub fn attribution_timing(
    model: &Model,
    tok: &Tokenizer,
    stream: &[EditRequest],
    base: &AttributionConfig,
    reps: usize,
) -> Result<Vec<StrategyTiming>> {
    if stream.is_empty() || reps == 0 {
        return Err(Error::Config(
            "timing needs at least one edit and one repetition".into(),
        ));
    }
    let mut edits: Vec<Vec<(Vec<u32>, u32)>> = Vec::with_capacity(stream.len());
    for r in stream {
        let spec = encode_request(tok, r)?;
        let mut prompts = vec![(spec.prompt.clone(), spec.old_object)];
        for p in &spec.paraphrases {
            prompts.push((p.clone(), spec.old_object));
        }
        edits.push(prompts);
    }
    let methods = [
        AttributionMethod::Lps,
        AttributionMethod::Psa,
        AttributionMethod::Mpc,
    ];
    let mut totals = [0.0f64; 3];
    for rep in 0..=reps {
        for (mi, &method) in methods.iter().enumerate() {
            let cfg = AttributionConfig { method, ..base.clone() };
            let t0 = std::time::Instant::now();
            for prompts in &edits {
                std::hint::black_box(attribution_matrices(model, prompts, &cfg)?);
            }
            if rep > 0 {
                totals[mi] += t0.elapsed().as_secs_f64();
            }
        }
    }
    Ok(methods
        .iter()
        .zip(totals)
        .map(|(m, t)| StrategyTiming {
            strategy: match m {
                AttributionMethod::Lps => "lps".into(),
                AttributionMethod::Psa => "psa".into(),
                AttributionMethod::Mpc => "mpc".into(),
            },
            n_edits: edits.len(),
            reps,
            mean_per_edit_s: t / (reps * edits.len()) as f64,
        })
        .collect())
}

pub fn timing_sidecar_json(report: &EditRunReport) -> Result<String> {
    let per_horizon: Vec<serde_json::Value> = report
        .horizons
        .iter()
        .map(|h| serde_json::json!({"horizon": h.horizon, "mean_step_time_s": h.mean_step_time_s}))
        .collect();
    Ok(serde_json::to_string_pretty(&serde_json::json!({
        "total_wall_s": report.total_wall_s,
        "horizons": per_horizon,
    }))?)
}

/// One row per horizon per metric, for plotting.
pub fn write_report_csv(report: &EditRunReport, path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "horizon,metric,value")?;
    for h in &report.horizons {
        if let Some(rel) = h.rel {
            writeln!(f, "{},rel,{rel:e}", h.horizon)?;
        }
        if let Some(gen) = h.gen {
            writeln!(f, "{},gen,{gen:e}", h.horizon)?;
        }
        writeln!(f, "{},loc,{:e}", h.horizon, h.loc)?;
        writeln!(f, "{},general_probe_accuracy,{:e}", h.horizon, h.general_probe_accuracy)?;
        for l in &h.drift.layers {
            writeln!(f, "{},drift_l2_mean_layer{},{:e}", h.horizon, l.layer, l.l2_mean)?;
        }
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_edit_requests, WorldConfig};

    fn small_world() -> FactWorld {
        FactWorld::generate(WorldConfig {
            n_subjects: 30,
            n_relations: 4,
            n_objects: 12,
            n_facts: 60,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn config_validation_catches_bad_horizons() {
        let mut cfg = RunConfig::default();
        cfg.horizons = vec![10, 10];
        assert!(cfg.validate().is_err());
        cfg.horizons = vec![];
        assert!(cfg.validate().is_err());
        cfg.eval_policy = EvalPolicy::FinalOnly;
        assert!(cfg.validate().is_ok());
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_edits_reports_null_rel_gen_and_probe_locality() {
        let world = small_world();
        let tok = world.tokenizer().unwrap();
        let model = Model::init(
            crate::model::ModelConfig {
                vocab_size: tok.words().len(),
                d_model: 16,
                d_ffn: 24,
                n_layers: 2,
                n_heads: 2,
                max_seq_len: 12,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let stream = make_edit_requests(&world, 8, 2, 11).unwrap();
        let sets = build_eval_sets(&world, &tok, &stream).unwrap();
        let rec = evaluate(&model, &model, &[], &sets, 0, 0.0).unwrap();
        assert_eq!(rec.rel, None);
        assert_eq!(rec.gen, None);
        // Probes come from untouched facts, so before any edit the probe
        // accuracy is the held-out accuracy on those prompts.
        let probe_acc = fraction_correct(&model, &sets.probes).unwrap().unwrap();
        assert_eq!(rec.loc, probe_acc);
        for l in &rec.drift.layers {
            assert_eq!(l.l2_mean, 0.0);
            assert_eq!(l.cosine_mean, 1.0);
        }
    }

    #[test]
    fn stream_shorter_than_horizon_is_rejected() {
        let world = small_world();
        let tok = world.tokenizer().unwrap();
        let model = Model::init(
            crate::model::ModelConfig {
                vocab_size: tok.words().len(),
                d_model: 16,
                d_ffn: 24,
                n_layers: 2,
                n_heads: 2,
                max_seq_len: 12,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let stream = make_edit_requests(&world, 4, 1, 11).unwrap();
        let cfg = RunConfig {
            horizons: vec![8],
            n_preserve: 4,
            ..Default::default()
        };
        assert!(run_batched(&model, &world, &stream, &cfg).is_err());
    }

    #[test]
    fn canonical_json_strips_every_timing_field() {
        let report = EditRunReport {
            horizons: vec![HorizonRecord {
                horizon: 1,
                edits_applied: 1,
                rel: Some(1.0),
                gen: None,
                loc: 0.5,
                general_probe_accuracy: 0.5,
                drift: DriftStats { layers: vec![] },
                mean_step_time_s: 1.23,
            }],
            n_edits: 1,
            n_success: 1,
            n_failed: 0,
            provenance: Provenance {
                config_hash: "abc".into(),
                world_seed: 1,
                run_seed: 2,
                engine_version: "0".into(),
            },
            total_wall_s: 9.9,
        };
        let s = canonical_report_json(&report).unwrap();
        assert!(!s.contains("mean_step_time_s"));
        assert!(!s.contains("total_wall_s"));
        assert!(s.contains("config_hash"));
    }

    #[test]
    fn role_ablation_k_zero_is_all_zero_deltas() {
        let world = small_world();
        let tok = world.tokenizer().unwrap();
        let model = Model::init(
            crate::model::ModelConfig {
                vocab_size: tok.words().len(),
                d_model: 16,
                d_ffn: 24,
                n_layers: 2,
                n_heads: 2,
                max_seq_len: 12,
                ..Default::default()
            },
            9,
        )
        .unwrap();
        let report = neuron_role_ablation(
            &model,
            &world,
            1,
            &[0],
            &AttributionConfig { layers: vec![1], ..Default::default() },
            10,
        )
        .unwrap();
        assert!(!report.entries.is_empty());
        for e in &report.entries {
            assert_eq!(e.delta, 0.0);
        }
    }

    #[test]
    fn role_ablation_rejects_oversized_k() {
        let world = small_world();
        let tok = world.tokenizer().unwrap();
        let model = Model::init(
            crate::model::ModelConfig {
                vocab_size: tok.words().len(),
                d_model: 16,
                d_ffn: 24,
                n_layers: 2,
                n_heads: 2,
                max_seq_len: 12,
                ..Default::default()
            },
            9,
        )
        .unwrap();
        assert!(neuron_role_ablation(
            &model,
            &world,
            1,
            &[25],
            &AttributionConfig::default(),
            10
        )
        .is_err());
    }
}
