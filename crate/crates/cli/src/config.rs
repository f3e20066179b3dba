//! Layered configuration: built-in defaults, then a TOML file, then
//! `NMKE_SECTION__KEY` environment variables, then `--set key=value`
//! flags, each layer overriding the previous one. Every hyperparameter
//! is addressable by its dotted key (`masking.alpha`).

use serde::{Deserialize, Serialize};
use serde_json::Value;

use nmke_core::attribution::AttributionConfig;
use nmke_core::corpus::WorldConfig;
use nmke_core::editor::EditorConfig;
use nmke_core::harness::{EvalPolicy, RunConfig};
use nmke_core::masking::MaskingConfig;
use nmke_core::model::{ModelConfig, TrainConfig};
use nmke_core::{Error, Result};

pub const ENV_PREFIX: &str = "NMKE_";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Seed for parameter initialization; training order uses `seed`.
    pub init_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSection {
    pub edits: usize,
    /// Locality probes sampled per edit request.
    pub probes_per_edit: usize,
    pub horizons: Vec<usize>,
    pub batch_size: usize,
    pub eval_policy: EvalPolicy,
    pub seed: u64,
    pub n_preserve: usize,
    pub online_verify: bool,
    /// Fixed selection ratio of the non-dynamic ablation arm.
    pub fixed_rho: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        let r = RunConfig::default();
        RunSection {
            edits: 200,
            probes_per_edit: 3,
            horizons: r.horizons,
            batch_size: r.batch_size,
            eval_policy: r.eval_policy,
            seed: r.seed,
            n_preserve: r.n_preserve,
            online_verify: r.online_verify,
            fixed_rho: 0.8,
        }
    }
}

/// The full materialized configuration echoed into every manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Config {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub attribution: AttributionConfig,
    pub masking: MaskingConfig,
    pub editor: EditorConfig,
    pub run: RunSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection { train: TrainConfig::default(), init_seed: 11 },
            attribution: AttributionConfig::default(),
            masking: MaskingConfig::default(),
            editor: EditorConfig::default(),
            run: RunSection::default(),
        }
    }
}

impl Config {
    /// Assembles the harness configuration from the flat sections.
    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            horizons: self.run.horizons.clone(),
            batch_size: self.run.batch_size,
            eval_policy: self.run.eval_policy,
            seed: self.run.seed,
            n_preserve: self.run.n_preserve,
            online_verify: self.run.online_verify,
            editor: self.editor.clone(),
            attribution: self.attribution.clone(),
            masking: self.masking.clone(),
        }
    }
}

/// Builds the effective config from all layers. `sets` are raw
/// `key=value` strings from the command line.
pub fn load(file: Option<&std::path::Path>, sets: &[String]) -> Result<Config> {
    let mut tree = serde_json::to_value(Config::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)?;
        let parsed: toml::Value = text
            .parse()
            .map_err(|e| Error::Schema(format!("config file {}: {e}", path.display())))?;
        let overlay = serde_json::to_value(parsed)?;
        merge_known(&mut tree, &overlay, String::new())?;
        check(&tree, "config file")?;
    }
    let mut env_pairs: Vec<(String, String)> = std::env::vars()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            if rest.contains("__") {
                Some((rest.to_ascii_lowercase().replace("__", "."), v))
            } else {
                None
            }
        })
        .collect();
    env_pairs.sort();
    for (key, raw) in &env_pairs {
        set_key(&mut tree, key, raw)?;
        check(&tree, &format!("environment override {ENV_PREFIX}{}", key.to_ascii_uppercase().replace('.', "__")))?;
    }
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set needs key=value, got {s:?}")))?;
        set_key(&mut tree, key, raw)?;
        check(&tree, &format!("--set {key}"))?;
    }
    check(&tree, "configuration")
}

fn check(tree: &Value, stage: &str) -> Result<Config> {
    serde_json::from_value(tree.clone())
        .map_err(|e| Error::Config(format!("{stage}: {e}")))
}

/// Overlays `src` onto `dst`, rejecting keys the default tree does not
/// know so typos fail loudly with their dotted path.
fn merge_known(dst: &mut Value, src: &Value, path: String) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match d.get_mut(k) {
                    Some(slot) => merge_known(slot, v, sub)?,
                    None => return Err(Error::Config(format!("unknown config key {sub}"))),
                }
            }
            Ok(())
        }
        (d, s) => {
            *d = s.clone();
            Ok(())
        }
    }
}

/// Sets one dotted key. The raw value is parsed as JSON when possible
/// (numbers, booleans, arrays), else taken as a string.
pub fn set_key(tree: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut node = &mut *tree;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config key {key}")))?,
            _ => return Err(Error::Config(format!("config key {key} does not name a field"))),
        };
    }
    if matches!(node, Value::Object(_)) {
        return Err(Error::Config(format!("config key {key} names a section, not a value")));
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = load(None, &[]).unwrap();
        assert_eq!(cfg.run.edits, 200);
        assert_eq!(cfg.masking.alpha, 1.0);
    }

    #[test]
    fn set_overrides_nested_value() {
        let cfg = load(None, &["masking.alpha=2.5".into(), "editor.edit_layers=[1,2]".into()])
            .unwrap();
        assert_eq!(cfg.masking.alpha, 2.5);
        assert_eq!(cfg.editor.edit_layers, vec![1, 2]);
    }

    #[test]
    fn unknown_key_is_rejected_with_its_path() {
        let err = load(None, &["masking.alhpa=2.5".into()]).unwrap_err();
        assert!(err.to_string().contains("masking.alhpa"), "{err}");
    }

    #[test]
    fn wrong_type_names_the_override() {
        let err = load(None, &["run.batch_size=fast".into()]).unwrap_err();
        assert!(err.to_string().contains("run.batch_size"), "{err}");
    }

    #[test]
    fn enum_values_parse_from_strings() {
        let cfg = load(None, &["masking.mode=general_only".into(), "run.eval_policy=final_only".into()])
            .unwrap();
        assert_eq!(cfg.masking.mode, nmke_core::masking::MaskMode::GeneralOnly);
        assert_eq!(cfg.run.eval_policy, EvalPolicy::FinalOnly);
    }

    #[test]
    fn config_file_overlays_defaults() {
        let dir = std::env::temp_dir().join("nmke-cli-config-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("partial.toml");
        std::fs::write(&path, "[world]\nn_facts = 64\n[editor]\nsolve_margin = 1.5\n").unwrap();
        let cfg = load(Some(&path), &[]).unwrap();
        assert_eq!(cfg.world.n_facts, 64);
        assert_eq!(cfg.editor.solve_margin, 1.5);
        assert_eq!(cfg.world.n_subjects, 200);
    }
}
