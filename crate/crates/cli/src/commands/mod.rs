pub mod ablate;
pub mod diagnose;
pub mod edit;
pub mod export;
pub mod reproduce;
pub mod run;
pub mod train;
pub mod world;

use std::path::Path;

use nmke_core::corpus::FactWorld;
use nmke_core::model::{Model, Tokenizer};
use nmke_core::Result;

pub fn load_world(path: &Path) -> Result<FactWorld> {
    FactWorld::load(path)
}

pub fn load_model(path: &Path) -> Result<(Model, Tokenizer)> {
    Model::load(path)
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

/// Writes text content and returns the path for manifest recording.
pub fn write_text(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content)?;
    Ok(())
}

pub fn status(msg: &str) {
    eprintln!("{msg}");
}
