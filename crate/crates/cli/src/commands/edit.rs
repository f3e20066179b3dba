use std::path::PathBuf;

use clap::Args;

use nmke_core::attribution::{attribution_matrices, AttributionConfig};
use nmke_core::corpus::{read_requests_jsonl, EditRequest};
use nmke_core::editor::{write_outcomes_jsonl, Editor};
use nmke_core::harness::{encode_request, preserve_prompts};
use nmke_core::masking::{mask_for, MaskMode};
use nmke_core::{Error, Result};

use crate::config::Config;
use crate::manifest::ManifestBuilder;

use super::{load_model, load_world, status};

fn parse_mask_mode(s: &str) -> std::result::Result<MaskMode, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown mask mode {s:?}"))
}

#[derive(Args)]
pub struct EditArgs {
    /// World JSON produced by `nmke world`.
    #[arg(long, value_name = "FILE")]
    pub world: PathBuf,

    /// Checkpoint produced by `nmke train`.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,

    /// Edit-request JSONL file; `--index` picks the request.
    #[arg(long, value_name = "FILE", conflicts_with = "request_json")]
    pub requests: Option<PathBuf>,

    /// Zero-based request index within `--requests`.
    #[arg(long, default_value_t = 0)]
    pub index: usize,

    /// One edit request as an inline JSON object.
    #[arg(long, value_name = "JSON")]
    pub request_json: Option<String>,

    /// Neuron selection mode for this edit: union, general_only,
    /// specific_only, overlap_only, non_overlap_only, or soft.
    #[arg(long, value_name = "MODE", value_parser = parse_mask_mode)]
    pub mask_mode: Option<MaskMode>,

    /// Plan only: print per-layer mask popcounts and change nothing.
    #[arg(long)]
    pub dry_run: bool,

    /// Destination for the edited checkpoint.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,

    /// Destination for the outcome record.
    #[arg(long, value_name = "FILE")]
    pub outcome: Option<PathBuf>,
}

pub fn run(cfg: &Config, args: &EditArgs) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(mode) = args.mask_mode {
        cfg.masking.mode = mode;
    }
    let world = load_world(&args.world)?;
    let (model, tok) = load_model(&args.model)?;

    let request: EditRequest = match (&args.requests, &args.request_json) {
        (Some(path), None) => {
            let all = read_requests_jsonl(path)?;
            all.get(args.index)
                .cloned()
                .ok_or_else(|| {
                    Error::Config(format!(
                        "--index {} out of range for {} requests",
                        args.index,
                        all.len()
                    ))
                })?
        }
        (None, Some(json)) => serde_json::from_str(json)?,
        _ => {
            return Err(Error::Config(
                "provide exactly one of --requests or --request-json".into(),
            ))
        }
    };
    let spec = encode_request(&tok, &request)?;

    if args.dry_run {
        // Planning stage of an edit: attribution at the edit layers over
        // the request surfaces, then the mask. No weights move.
        let mut prompts = vec![(spec.prompt.clone(), spec.old_object)];
        for p in &spec.paraphrases {
            prompts.push((p.clone(), spec.old_object));
        }
        let attr_cfg = AttributionConfig {
            layers: cfg.editor.edit_layers.clone(),
            ..cfg.attribution.clone()
        };
        let mats = attribution_matrices(&model, &prompts, &attr_cfg)?;
        let mut plan = Vec::new();
        for m in &mats {
            let mask = mask_for(m, &cfg.masking)?;
            plan.push(serde_json::json!({
                "layer": m.layer,
                "popcount": mask.popcount(),
                "d_ffn": m.cols,
            }));
        }
        println!(
            "{}",
            serde_json::to_string_pretty(&serde_json::json!({
                "dry_run": true,
                "prompt": request.prompt,
                "target_new": request.target_new,
                "masks": plan,
            }))?
        );
        return Ok(());
    }

    let preserve = preserve_prompts(&world, &tok, std::slice::from_ref(&request), cfg.run.n_preserve)?;
    let mut editor = Editor::new(&model, &preserve, cfg.editor.clone())?;
    let (edited, outcome) = editor.apply_edit(&model, &spec, &cfg.attribution, &cfg.masking)?;

    let mut mb = ManifestBuilder::new("edit", &cfg);
    mb.input(&args.world)?;
    mb.input(&args.model)?;
    if let Some(out) = &args.out {
        edited.save(out, &tok)?;
        mb.output(out)?;
    }
    if let Some(path) = &args.outcome {
        write_outcomes_jsonl(std::slice::from_ref(&outcome), path)?;
        mb.output(path)?;
    }
    if let Some(anchor) = args.out.as_ref().or(args.outcome.as_ref()) {
        mb.write_beside(anchor)?;
    }
    println!("{}", serde_json::to_string(&outcome)?);
    if !outcome.success {
        let why = outcome
            .error
            .unwrap_or_else(|| "the edited prompt still predicts the old object".into());
        return Err(Error::Numerical(format!("edit did not land: {why}")));
    }
    status(&format!(
        "edit: {:?} -> {:?} applied across {} layer(s)",
        request.prompt,
        request.target_new,
        outcome.layers.len()
    ));
    Ok(())
}
