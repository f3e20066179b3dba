use std::path::PathBuf;

use clap::Args;

use nmke_core::corpus::{make_edit_requests, read_requests_jsonl};
use nmke_core::editor::write_outcomes_jsonl;
use nmke_core::harness::{
    canonical_report_json, run_batched, timing_sidecar_json, write_report_csv, RunOutput,
};
use nmke_core::Result;

use crate::config::Config;
use crate::manifest::ManifestBuilder;

use super::{ensure_dir, load_model, load_world, status, write_text};

#[derive(Args)]
pub struct RunArgs {
    /// World JSON produced by `nmke world`.
    #[arg(long, value_name = "FILE")]
    pub world: PathBuf,

    /// Checkpoint produced by `nmke train`.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,

    /// Output directory for report, outcomes, and manifest.
    #[arg(long, value_name = "DIR", default_value = "run-out")]
    pub out_dir: PathBuf,

    /// Edit-request JSONL; generated from the world when absent.
    #[arg(long, value_name = "FILE")]
    pub requests: Option<PathBuf>,

    /// Number of edits when generating the stream.
    #[arg(long)]
    pub edits: Option<usize>,

    /// Comma-separated evaluation horizons, e.g. 10,100,200.
    #[arg(long, value_delimiter = ',')]
    pub horizons: Option<Vec<usize>>,

    /// Edits applied jointly per step; 1 is sequential.
    #[arg(long)]
    pub batch_size: Option<usize>,

    /// Also save the fully edited checkpoint.
    #[arg(long)]
    pub save_model: bool,
}

pub fn run(cfg: &Config, args: &RunArgs) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(e) = args.edits {
        cfg.run.edits = e;
    }
    if let Some(h) = &args.horizons {
        cfg.run.horizons = h.clone();
    }
    if let Some(b) = args.batch_size {
        cfg.run.batch_size = b;
    }
    let world = load_world(&args.world)?;
    let (model, tok) = load_model(&args.model)?;
    let stream = match &args.requests {
        Some(path) => read_requests_jsonl(path)?,
        None => make_edit_requests(&world, cfg.run.edits, cfg.run.probes_per_edit, cfg.run.seed)?,
    };

    let run_cfg = cfg.run_config();
    let out = run_batched(&model, &world, &stream, &run_cfg)?;
    write_outputs(&cfg, args, &out, &stream, &tok)?;
    let last = out.report.horizons.last();
    status(&format!(
        "run: {} edits, {} landed; final rel={:?} gen={:?} loc={:?} -> {}",
        out.report.n_edits,
        out.report.n_success,
        last.and_then(|h| h.rel),
        last.and_then(|h| h.gen),
        last.map(|h| h.loc),
        args.out_dir.display()
    ));
    Ok(())
}

fn write_outputs(
    cfg: &Config,
    args: &RunArgs,
    out: &RunOutput,
    stream: &[nmke_core::corpus::EditRequest],
    tok: &nmke_core::model::Tokenizer,
) -> Result<()> {
    ensure_dir(&args.out_dir)?;
    let report_path = args.out_dir.join("report.json");
    write_text(&report_path, &(canonical_report_json(&out.report)? + "\n"))?;
    let timing_path = args.out_dir.join("timing.json");
    write_text(&timing_path, &(timing_sidecar_json(&out.report)? + "\n"))?;
    let outcomes_path = args.out_dir.join("outcomes.jsonl");
    write_outcomes_jsonl(&out.outcomes, &outcomes_path)?;
    let csv_path = args.out_dir.join("report.csv");
    write_report_csv(&out.report, &csv_path)?;

    let mut mb = ManifestBuilder::new("run", cfg);
    mb.input(&args.world)?;
    mb.input(&args.model)?;
    if let Some(reqs) = &args.requests {
        mb.input(reqs)?;
    } else {
        // Generated stream is an output so the manifest pins it.
        let stream_path = args.out_dir.join("requests.jsonl");
        nmke_core::corpus::write_requests_jsonl(stream, &stream_path)?;
        mb.output(&stream_path)?;
    }
    mb.output(&report_path)?;
    mb.output(&outcomes_path)?;
    mb.output(&csv_path)?;
    if args.save_model {
        let model_path = args.out_dir.join("edited.ckpt");
        out.model.save(&model_path, tok)?;
        mb.output(&model_path)?;
    }
    mb.write_into(&args.out_dir)?;
    Ok(())
}
