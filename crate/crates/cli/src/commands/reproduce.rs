//! Meta-command chaining the headline experiments: build a world, train
//! the model, run the sequential edit stream, pair it against a dense
//! all-ones baseline with drift stats, profile neuron roles, and time the
//! attribution strategies. Every emitted report is canonical JSON with
//! wall-clock fields stripped, so two invocations with the same profile
//! produce byte-identical reports; raw timings land in a separate file.

use std::path::PathBuf;

use clap::Args;

use nmke_core::corpus::{make_edit_requests, read_requests_jsonl, write_requests_jsonl, FactWorld, WorldConfig};
use nmke_core::diagnostics::drift;
use nmke_core::harness::{attribution_timing, canonical_json, canonical_report_json, neuron_role_ablation, run_batched, RunOutput};
use nmke_core::masking::MaskingConfig;
use nmke_core::model::{train_facts, Model, ModelConfig};
use nmke_core::{Error, Result};

use crate::config::Config;
use crate::manifest::{self, ManifestBuilder};

use super::{ensure_dir, status, write_text};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Quick,
    Full,
}

impl Profile {
    fn name(self) -> &'static str {
        match self {
            Profile::Quick => "quick",
            Profile::Full => "full",
        }
    }
}

fn parse_profile(s: &str) -> std::result::Result<Profile, String> {
    match s {
        "quick" => Ok(Profile::Quick),
        "full" => Ok(Profile::Full),
        other => Err(format!("unknown profile {other:?}; expected quick or full")),
    }
}

#[derive(Args)]
pub struct ReproduceArgs {
    /// Output directory; world and checkpoint stages found here with
    /// matching manifests are reused instead of regenerated.
    #[arg(long, value_name = "DIR", default_value = "reproduce-out")]
    pub out_dir: PathBuf,

    /// quick = small world and model, full = default scale.
    #[arg(long, value_name = "NAME", default_value = "quick", value_parser = parse_profile)]
    pub profile: Profile,
}

/// Scales the configured experiment down to a fixture that trains in
/// seconds while exercising every stage.
fn apply_profile(cfg: &mut Config, profile: Profile) {
    if profile == Profile::Full {
        return;
    }
    cfg.world = WorldConfig {
        n_subjects: 60,
        n_relations: 6,
        n_objects: 30,
        n_facts: 150,
        seed: 17,
    };
    cfg.model = ModelConfig {
        d_model: 48,
        d_ffn: 128,
        n_layers: 3,
        n_heads: 4,
        max_seq_len: 12,
        ..cfg.model.clone()
    };
    cfg.train.init_seed = 91;
    cfg.train.train.max_epochs = 60;
    cfg.train.train.target_recall = 0.99;
    cfg.train.train.seed = 23;
    cfg.run.edits = 12;
    cfg.run.horizons = vec![12];
    cfg.run.n_preserve = 150;
    cfg.editor.edit_layers = vec![1];
    cfg.attribution.layers = vec![1];
}

pub fn run(cfg: &Config, args: &ReproduceArgs) -> Result<()> {
    let mut cfg = cfg.clone();
    apply_profile(&mut cfg, args.profile);
    ensure_dir(&args.out_dir)?;

    let world_path = args.out_dir.join("world.json");
    let requests_path = args.out_dir.join("requests.jsonl");
    let world_manifest = args.out_dir.join("world.json.manifest.json");
    let (world, stream) = if manifest::reusable(&world_manifest, "reproduce:world", &cfg) {
        status("reproduce: reusing world");
        (FactWorld::load(&world_path)?, read_requests_jsonl(&requests_path)?)
    } else {
        let world = FactWorld::generate(cfg.world.clone())?;
        world.save(&world_path)?;
        let stream = make_edit_requests(&world, cfg.run.edits, cfg.run.probes_per_edit, cfg.run.seed)?;
        write_requests_jsonl(&stream, &requests_path)?;
        let mut mb = ManifestBuilder::new("reproduce:world", &cfg);
        mb.output(&world_path)?;
        mb.output(&requests_path)?;
        mb.write_beside(&world_path)?;
        status(&format!("reproduce: world with {} facts, {} edit requests", world.facts.len(), stream.len()));
        (world, stream)
    };
    let tok = world.tokenizer()?;

    let model_path = args.out_dir.join("model.ckpt");
    let model_manifest = args.out_dir.join("model.ckpt.manifest.json");
    let model = if manifest::reusable(&model_manifest, "reproduce:train", &cfg) {
        status("reproduce: reusing checkpoint");
        Model::load(&model_path)?.0
    } else {
        let model_cfg = ModelConfig { vocab_size: tok.words().len(), ..cfg.model.clone() };
        let mut model = Model::init(model_cfg, cfg.train.init_seed)?;
        let examples = world.training_examples(&tok)?;
        let probes = world.recall_probes(&tok)?;
        let report = train_facts(&mut model, &examples, &probes, &cfg.train.train)?;
        model.save(&model_path, &tok)?;
        let mut mb = ManifestBuilder::new("reproduce:train", &cfg);
        mb.input(&world_path)?;
        mb.output(&model_path)?;
        mb.write_beside(&model_path)?;
        status(&format!("reproduce: trained to recall {:.4} in {} epochs", report.final_recall, report.epochs_run));
        model
    };

    let run_cfg = cfg.run_config();
    let masked = run_batched(&model, &world, &stream, &run_cfg)?;
    let report_path = args.out_dir.join("report.json");
    write_text(&report_path, &(canonical_report_json(&masked.report)? + "\n"))?;
    let last = masked.report.horizons.last().ok_or_else(|| Error::Config("run produced no horizon records".into()))?;
    status(&format!(
        "reproduce: edit run rel={:?} gen={:?} loc={:.3}",
        last.rel, last.gen, last.loc
    ));

    // Dense all-ones arm on the identical stream, for the paired drift
    // comparison.
    let dense_cfg = nmke_core::harness::RunConfig {
        masking: MaskingConfig {
            a_general: 0.0,
            b_general: 1.0,
            a_specific: 0.0,
            b_specific: 1.0,
            ..run_cfg.masking.clone()
        },
        ..run_cfg.clone()
    };
    let dense = run_batched(&model, &world, &stream, &dense_cfg)?;
    let pair = serde_json::json!({
        "masked": arm_summary(&masked)?,
        "dense": arm_summary(&dense)?,
        "drift_masked": drift(&model, &masked.model)?,
        "drift_dense": drift(&model, &dense.model)?,
    });
    let pair_path = args.out_dir.join("pair.json");
    write_text(&pair_path, &(canonical_json(&pair)? + "\n"))?;
    status(&format!(
        "reproduce: paired dense arm loc={:.3} vs masked {:.3}",
        dense.report.horizons.last().map(|h| h.loc).unwrap_or(f64::NAN),
        last.loc
    ));

    let role_layer = *cfg.attribution.layers.first().ok_or_else(|| Error::Config("attribution.layers is empty".into()))?;
    let max_prompts = match args.profile {
        Profile::Quick => 60,
        Profile::Full => 200,
    };
    let roles = neuron_role_ablation(&model, &world, role_layer, &[10], &cfg.attribution, max_prompts)?;
    let roles_path = args.out_dir.join("roles.json");
    write_text(&roles_path, &(canonical_json(&roles)? + "\n"))?;
    status(&format!(
        "reproduce: role ablation at layer {role_layer}, {} general neurons",
        roles.general_count
    ));

    let (timing_edits, reps) = match args.profile {
        Profile::Quick => (8usize, 1usize),
        Profile::Full => (16, 2),
    };
    let timing_stream = &stream[..timing_edits.min(stream.len())];
    let timing = attribution_timing(&model, &tok, timing_stream, &cfg.attribution, reps)?;
    let timing_path = args.out_dir.join("timing.json");
    write_text(&timing_path, &(canonical_json(&timing)? + "\n"))?;
    let timing_raw_path = args.out_dir.join("timing_raw.json");
    write_text(&timing_raw_path, &(serde_json::to_string_pretty(&timing)? + "\n"))?;

    let aggregate = serde_json::json!({
        "profile": args.profile.name(),
        "config_hash": manifest::config_hash(&cfg)?,
        "run": masked.report,
        "pair": pair,
        "roles": roles,
        "timing": timing,
    });
    let aggregate_path = args.out_dir.join("reproduce_report.json");
    write_text(&aggregate_path, &(canonical_json(&aggregate)? + "\n"))?;

    let mut mb = ManifestBuilder::new("reproduce", &cfg);
    mb.input(&world_path)?;
    mb.input(&model_path)?;
    for p in [&report_path, &pair_path, &roles_path, &timing_path, &timing_raw_path, &aggregate_path] {
        mb.output(p)?;
    }
    mb.write_into(&args.out_dir)?;
    status(&format!("reproduce: {} profile complete -> {}", args.profile.name(), args.out_dir.display()));
    Ok(())
}

fn arm_summary(out: &RunOutput) -> Result<serde_json::Value> {
    let last = out.report.horizons.last().ok_or_else(|| Error::Config("run produced no horizon records".into()))?;
    Ok(serde_json::json!({
        "rel": last.rel,
        "gen": last.gen,
        "loc": last.loc,
        "n_success": out.report.n_success,
        "n_edits": out.report.n_edits,
    }))
}
