use std::path::PathBuf;

use clap::Args;

use nmke_core::attribution::attribution_matrices;
use nmke_core::corpus::FactWorld;
use nmke_core::diagnostics::{
    drift, memory_accounting, role_profile, write_drift_csv, write_role_csv,
};
use nmke_core::harness::canonical_json;
use nmke_core::model::Tokenizer;
use nmke_core::{Error, Result};

use crate::config::Config;
use crate::manifest::ManifestBuilder;

use super::{ensure_dir, load_model, load_world, status, write_text};

#[derive(Args)]
pub struct DiagnoseArgs {
    /// Reference checkpoint for drift.
    #[arg(long, value_name = "FILE")]
    pub base: PathBuf,

    /// Checkpoint to compare against the reference.
    #[arg(long, value_name = "FILE")]
    pub edited: Option<PathBuf>,

    /// World JSON; enables the attribution-based profiles.
    #[arg(long, value_name = "FILE")]
    pub world: Option<PathBuf>,

    /// Prompts sampled for the attribution profiles.
    #[arg(long, default_value_t = 64)]
    pub profile_prompts: usize,

    /// Output directory for the diagnostic reports.
    #[arg(long, value_name = "DIR", default_value = "diagnose-out")]
    pub out_dir: PathBuf,
}

/// Recall prompts with their gold objects, capped at `n`, for profiling.
fn profile_prompts(
    world: &FactWorld,
    tok: &Tokenizer,
    n: usize,
) -> Result<Vec<(Vec<u32>, u32)>> {
    let mut prompts = Vec::new();
    for fact in world.facts.iter().take(n) {
        let ids = tok.encode(&world.canonical_prompt(fact))?;
        let obj = tok.id(world.object_word(fact))?;
        prompts.push((ids, obj));
    }
    if prompts.is_empty() {
        return Err(Error::Config("world holds no facts to profile".into()));
    }
    Ok(prompts)
}

pub fn run(cfg: &Config, args: &DiagnoseArgs) -> Result<()> {
    if args.edited.is_none() && args.world.is_none() {
        return Err(Error::Config(
            "nothing to diagnose: pass --edited for drift, --world for profiles, or both".into(),
        ));
    }
    let (base, tok) = load_model(&args.base)?;
    ensure_dir(&args.out_dir)?;
    let mut mb = ManifestBuilder::new("diagnose", cfg);
    mb.input(&args.base)?;

    if let Some(edited_path) = &args.edited {
        let (edited, _) = load_model(edited_path)?;
        mb.input(edited_path)?;
        let stats = drift(&base, &edited)?;
        let json_path = args.out_dir.join("drift.json");
        write_text(&json_path, &(canonical_json(&stats)? + "\n"))?;
        let csv_path = args.out_dir.join("drift.csv");
        write_drift_csv(&stats, &csv_path)?;
        mb.output(&json_path)?;
        mb.output(&csv_path)?;
        let moved = stats.layers.iter().filter(|l| l.l2_mean > 0.0).count();
        status(&format!(
            "diagnose: drift across {} layers, {} moved",
            stats.layers.len(),
            moved
        ));
    }

    if let Some(world_path) = &args.world {
        let world = load_world(world_path)?;
        mb.input(world_path)?;
        let prompts = profile_prompts(&world, &tok, args.profile_prompts)?;
        let mats = attribution_matrices(&base, &prompts, &cfg.attribution)?;

        let roles = role_profile(&mats, &cfg.masking)?;
        let roles_json = args.out_dir.join("roles.json");
        write_text(&roles_json, &(canonical_json(&roles)? + "\n"))?;
        let roles_csv = args.out_dir.join("roles.csv");
        write_role_csv(&roles, &roles_csv)?;
        mb.output(&roles_json)?;
        mb.output(&roles_csv)?;

        let memory = memory_accounting(&mats);
        let mem_path = args.out_dir.join("memory.json");
        write_text(&mem_path, &(canonical_json(&memory)? + "\n"))?;
        mb.output(&mem_path)?;
        status(&format!(
            "diagnose: profiled {} prompts over {} layers, {} attribution bytes",
            prompts.len(),
            roles.layers.len(),
            memory.total_bytes
        ));
    }

    mb.write_into(&args.out_dir)?;
    Ok(())
}
