use std::path::PathBuf;

use clap::Args;

use nmke_core::corpus::{make_edit_requests, read_requests_jsonl};
use nmke_core::harness::{ablation_mask_modes, canonical_json, neuron_role_ablation};
use nmke_core::Result;

use crate::config::Config;
use crate::manifest::ManifestBuilder;

use super::{ensure_dir, load_model, load_world, status, write_text};

#[derive(Args)]
pub struct AblateArgs {
    /// World JSON produced by `nmke world`.
    #[arg(long, value_name = "FILE")]
    pub world: PathBuf,

    /// Checkpoint produced by `nmke train`.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,

    /// Output directory for the ablation reports.
    #[arg(long, value_name = "DIR", default_value = "ablate-out")]
    pub out_dir: PathBuf,

    /// Edit-request JSONL for the mask-mode arms; generated when absent.
    #[arg(long, value_name = "FILE")]
    pub requests: Option<PathBuf>,

    /// Number of edits per mask-mode arm when generating the stream.
    #[arg(long)]
    pub edits: Option<usize>,

    /// Run only the selection-strategy arms.
    #[arg(long, conflicts_with = "roles_only")]
    pub mask_modes_only: bool,

    /// Run only the neuron-role ablation.
    #[arg(long)]
    pub roles_only: bool,

    /// Layer profiled by the role ablation; default is the first
    /// attribution layer.
    #[arg(long)]
    pub layer: Option<usize>,

    /// Comma-separated top-k sizes for the role ablation.
    #[arg(long, value_delimiter = ',', default_value = "10")]
    pub top_ks: Vec<usize>,

    /// Probe prompts per task in the role ablation.
    #[arg(long, default_value_t = 200)]
    pub max_prompts: usize,
}

pub fn run(cfg: &Config, args: &AblateArgs) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(e) = args.edits {
        cfg.run.edits = e;
    }
    let world = load_world(&args.world)?;
    let (model, _tok) = load_model(&args.model)?;
    ensure_dir(&args.out_dir)?;

    let mut mb = ManifestBuilder::new("ablate", &cfg);
    mb.input(&args.world)?;
    mb.input(&args.model)?;

    if !args.roles_only {
        let stream = match &args.requests {
            Some(path) => {
                mb.input(path)?;
                read_requests_jsonl(path)?
            }
            None => make_edit_requests(
                &world,
                cfg.run.edits,
                cfg.run.probes_per_edit,
                cfg.run.seed,
            )?,
        };
        let run_cfg = cfg.run_config();
        let arms = ablation_mask_modes(&model, &world, &stream, &run_cfg, cfg.run.fixed_rho)?;
        let path = args.out_dir.join("mask_modes.json");
        write_text(&path, &(canonical_json(&arms)? + "\n"))?;
        mb.output(&path)?;
        for arm in &arms {
            let last = arm.report.horizons.last();
            status(&format!(
                "ablate[{}]: rel={:?} gen={:?} loc={:?}",
                arm.name,
                last.and_then(|h| h.rel),
                last.and_then(|h| h.gen),
                last.map(|h| h.loc),
            ));
        }
    }

    if !args.mask_modes_only {
        let layer = match args.layer {
            Some(l) => l,
            None => *cfg.attribution.layers.first().ok_or_else(|| {
                nmke_core::Error::Config("attribution.layers is empty".into())
            })?,
        };
        let report = neuron_role_ablation(
            &model,
            &world,
            layer,
            &args.top_ks,
            &cfg.attribution,
            args.max_prompts,
        )?;
        let path = args.out_dir.join("roles.json");
        write_text(&path, &(canonical_json(&report)? + "\n"))?;
        mb.output(&path)?;
        status(&format!(
            "ablate[roles]: layer {} classified {} general neurons over {} tasks",
            report.layer, report.general_count, report.n_tasks,
        ));
    }

    mb.write_into(&args.out_dir)?;
    status(&format!("ablate: reports in {}", args.out_dir.display()));
    Ok(())
}
