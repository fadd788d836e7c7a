use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{PrepareOptions, SynthSpec};
use crate::error::{Error, Result};
use crate::metrics::DecisionRule;
use crate::model::{Modality, ModelConfig, TabularMode};
use crate::train::TrainConfig;

/// Everything a subcommand can be configured with. Loaded from TOML; every
/// missing key takes its default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: PrepareOptions,
    pub synth: SynthSpec,
    pub decision_rule: DecisionRule,
}

/// Flag values that override the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub modality: Option<Modality>,
    pub tabular_mode: Option<TabularMode>,
    pub epochs: Option<usize>,
    pub runs: Option<usize>,
    pub top_k: Option<usize>,
    pub samples_per_class: Option<usize>,
    pub decision_rule: Option<DecisionRule>,
    pub text_pe: Option<bool>,
    pub weight_sharing: Option<bool>,
}

impl Settings {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    /// Defaults, then `path` if given, then `flags`.
    pub fn resolve(path: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let mut s = match path {
            Some(p) => Self::from_toml(&std::fs::read_to_string(p)?)?,
            None => Self::default(),
        };
        if let Some(seed) = flags.seed {
            s.train.base_seed = seed;
            s.synth.seed = seed;
        }
        if let Some(m) = flags.modality {
            s.model.modality = m;
        }
        if let Some(m) = flags.tabular_mode {
            s.model.tabular_mode = m;
        }
        if let Some(e) = flags.epochs {
            s.train.epochs = e;
        }
        if let Some(r) = flags.runs {
            s.train.num_runs = r;
        }
        if let Some(k) = flags.top_k {
            s.data.top_k = k;
        }
        if let Some(n) = flags.samples_per_class {
            s.synth.samples_per_class = n;
        }
        if let Some(r) = flags.decision_rule {
            s.decision_rule = r;
        }
        if let Some(t) = flags.text_pe {
            s.model.text_pe = t;
        }
        if let Some(w) = flags.weight_sharing {
            s.model.weight_sharing = w;
        }
        s.model.max_text_len = s.data.max_text_len;
        s.train.validate()?;
        s.synth.validate()?;
        Ok(s)
    }
}

/// Record of one invocation, written before any long computation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub settings: Settings,
    pub seeds: Vec<u64>,
    /// Input file path to hex SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String], settings: &Settings, seeds: Vec<u64>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            argv: argv.to_vec(),
            settings: settings.clone(),
            seeds,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let hash = hex::encode(Sha256::digest(std::fs::read(path)?));
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    pub fn output(&mut self, path: PathBuf) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("manifest.json"), self)
    }
}

/// Pretty JSON with object keys in sorted order.
pub fn to_sorted_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(&serde_json::to_value(value)?)? + "\n")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_sorted_json(value)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(
            &path,
            "[train]\nepochs = 7\nnum_runs = 2\n[model]\ntabular_mode = \"fourier_pe\"\n",
        )
        .unwrap();
        let flags = Overrides {
            epochs: Some(3),
            text_pe: Some(false),
            ..Default::default()
        };
        let s = Settings::resolve(Some(&path), &flags).unwrap();
        assert_eq!(s.train.epochs, 3);
        assert!(!s.model.text_pe);
        assert_eq!(s.train.num_runs, 2);
        assert_eq!(s.model.tabular_mode, TabularMode::FourierPe);
        assert_eq!(s.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(
            Settings::from_toml("[train]\nepoch = 3\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Settings::from_toml("[model]\nmodality = \"audio\"\n"),
            Err(Error::Config(_))
        ));
        let flags = Overrides {
            epochs: Some(0),
            ..Default::default()
        };
        assert!(Settings::resolve(None, &flags).is_err());
    }

    #[test]
    fn sorted_json_orders_keys() {
        let s = to_sorted_json(&RunManifest::new("x", &[], &Settings::default(), vec![0])).unwrap();
        let keys: Vec<&str> = s
            .lines()
            .filter(|l| l.starts_with("  \""))
            .map(|l| l.trim().split('"').nth(1).unwrap())
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }
}
