//! Run manifests. Every command that writes files also writes a manifest
//! naming the command, the fully materialized config, and content hashes
//! of its inputs and outputs, enough to re-run the command byte-identically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use nmke_core::{Error, Result};

use crate::config::Config;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest: String,
    pub command: String,
    pub engine_version: String,
    pub config_hash: String,
    pub effective_config: Config,
    /// File name -> sha256 of content, for inputs consumed and outputs
    /// produced. BTreeMap keeps serialization order stable.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

pub fn config_hash(cfg: &Config) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(cfg)?))
}

pub struct ManifestBuilder {
    command: String,
    cfg: Config,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl ManifestBuilder {
    pub fn new(command: &str, cfg: &Config) -> ManifestBuilder {
        ManifestBuilder {
            command: command.to_string(),
            cfg: cfg.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(file_name(path)?, hash_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(file_name(path)?, hash_file(path)?);
        Ok(())
    }

    pub fn build(&self) -> Result<Manifest> {
        Ok(Manifest {
            manifest: "manifest/v1".into(),
            command: self.command.clone(),
            engine_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config_hash(&self.cfg)?,
            effective_config: self.cfg.clone(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
        })
    }

    /// Writes `manifest.json` into `dir` (or beside a single output file
    /// as `<file>.manifest.json` via `write_beside`).
    pub fn write_into(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        self.write_to(&path)?;
        Ok(path)
    }

    pub fn write_beside(&self, output: &Path) -> Result<PathBuf> {
        let mut name = file_name(output)?;
        name.push_str(".manifest.json");
        let path = output.with_file_name(name);
        self.write_to(&path)?;
        Ok(path)
    }

    fn write_to(&self, path: &Path) -> Result<()> {
        let m = self.build()?;
        std::fs::write(path, serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    }
}

fn file_name(path: &Path) -> Result<String> {
    Ok(path
        .file_name()
        .ok_or_else(|| Error::Config(format!("path {} has no file name", path.display())))?
        .to_string_lossy()
        .into_owned())
}

/// True when `path` carries a manifest produced by the same command under
/// the same effective config, with every recorded output still matching
/// its hash. Used to skip regeneration.
pub fn reusable(manifest_path: &Path, command: &str, cfg: &Config) -> bool {
    let Ok(text) = std::fs::read_to_string(manifest_path) else {
        return false;
    };
    let Ok(m) = serde_json::from_str::<Manifest>(&text) else {
        return false;
    };
    let Ok(hash) = config_hash(cfg) else {
        return false;
    };
    if m.command != command || m.config_hash != hash {
        return false;
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    m.outputs.iter().all(|(name, want)| {
        hash_file(&dir.join(name)).is_ok_and(|got| got == *want)
    })
}
