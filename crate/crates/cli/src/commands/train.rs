use std::path::PathBuf;

use clap::Args;

use nmke_core::model::{train_facts, Model, ModelConfig};
use nmke_core::Result;

use crate::config::Config;
use crate::manifest::ManifestBuilder;

use super::{load_world, status};

#[derive(Args)]
pub struct TrainArgs {
    /// World JSON produced by `nmke world`.
    #[arg(long, value_name = "FILE")]
    pub world: PathBuf,

    /// Destination for the trained checkpoint.
    #[arg(long, value_name = "FILE", default_value = "model.ckpt")]
    pub out: PathBuf,

    /// Stop after this many epochs regardless of recall.
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

pub fn run(cfg: &Config, args: &TrainArgs) -> Result<()> {
    let world = load_world(&args.world)?;
    let tok = world.tokenizer()?;
    // The vocabulary is owned by the world; the config value only sizes
    // models built without one.
    let model_cfg = ModelConfig {
        vocab_size: tok.words().len(),
        ..cfg.model.clone()
    };
    let mut model = Model::init(model_cfg, cfg.train.init_seed)?;
    let examples = world.training_examples(&tok)?;
    let probes = world.recall_probes(&tok)?;
    let mut train_cfg = cfg.train.train.clone();
    if let Some(m) = args.max_epochs {
        train_cfg.max_epochs = m;
    }
    let report = train_facts(&mut model, &examples, &probes, &train_cfg)?;
    model.save(&args.out, &tok)?;
    let mut mb = ManifestBuilder::new("train", cfg);
    mb.input(&args.world)?;
    mb.output(&args.out)?;
    mb.write_beside(&args.out)?;
    status(&format!(
        "train: {} epochs, recall {:.4} -> {}",
        report.epochs_run,
        report.final_recall,
        args.out.display()
    ));
    Ok(())
}
