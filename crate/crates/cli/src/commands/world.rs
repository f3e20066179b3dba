use std::path::PathBuf;

use clap::Args;

use nmke_core::corpus::{make_edit_requests, write_requests_jsonl, FactWorld};
use nmke_core::Result;

use crate::config::Config;
use crate::manifest::ManifestBuilder;

use super::status;

#[derive(Args)]
pub struct WorldArgs {
    /// Destination for the world JSON.
    #[arg(long, value_name = "FILE", default_value = "world.json")]
    pub out: PathBuf,

    /// Also write an edit-request stream next to the world.
    #[arg(long, value_name = "FILE")]
    pub requests: Option<PathBuf>,
}

pub fn run(cfg: &Config, args: &WorldArgs) -> Result<()> {
    let world = FactWorld::generate(cfg.world.clone())?;
    world.save(&args.out)?;
    let mut mb = ManifestBuilder::new("world", cfg);
    mb.output(&args.out)?;
    if let Some(reqs_path) = &args.requests {
        let reqs = make_edit_requests(&world, cfg.run.edits, cfg.run.probes_per_edit, cfg.run.seed)?;
        write_requests_jsonl(&reqs, reqs_path)?;
        mb.output(reqs_path)?;
    }
    mb.write_beside(&args.out)?;
    status(&format!(
        "world: {} facts, {} vocabulary words -> {}",
        world.facts.len(),
        world.vocab.len(),
        args.out.display()
    ));
    Ok(())
}
