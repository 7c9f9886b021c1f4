use std::path::{Path, PathBuf};

use histaid_core::data::InputOptions;
use histaid_core::experiment::RunSpec;
use histaid_core::{Error, ModelConfig, Result, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory written by `histaid build`.
    pub build: PathBuf,
    pub store: PathBuf,
}

/// One experiment: where the cohort lives, the model, input options,
/// training settings and seeds. Relative paths resolve against the
/// directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    /// Capacities (`k_img`, `k_text`) are taken from `[model]`.
    #[serde(default)]
    pub input: InputOptions,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_jobs() -> usize {
    1
}

/// A parsed config and the exact text it came from.
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub text: String,
}

impl ExperimentConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.input.k_img = c.model.k_img;
        c.input.k_text = c.model.k_text;
        for p in [&mut c.data.build, &mut c.data.store] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<LoadedConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(LoadedConfig {
            config: Self::parse(&text, base)?,
            text,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        for (what, p) in [("build directory", &self.data.build), ("embedding store", &self.data.store)] {
            if !p.exists() {
                return Err(Error::Config(format!("{what} {} does not exist", p.display())));
            }
        }
        self.run_spec().validate()
    }

    pub fn run_spec(&self) -> RunSpec {
        RunSpec {
            model: self.model.clone(),
            input: self.input.clone(),
            train: self.train.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = ExperimentConfig::parse(
            "[data]\nbuild = \"b\"\nstore = \"/abs/s.tmeb\"\n[model]\nk_text = 7\n",
            Path::new("/cfg"),
        )
        .unwrap();
        assert_eq!(c.seeds, vec![0, 1, 2, 3, 4]);
        assert_eq!(c.data.build, PathBuf::from("/cfg/b"));
        assert_eq!(c.data.store, PathBuf::from("/abs/s.tmeb"));
        assert_eq!(c.input.k_text, 7);
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let r = ExperimentConfig::parse("sedes = [1]\n[data]\nbuild = \"b\"\nstore = \"s\"\n", Path::new("."));
        assert!(matches!(r, Err(Error::Config(_))));
        let r = ExperimentConfig::parse(
            "[data]\nbuild = \"b\"\nstore = \"s\"\n[model.encoder]\nd_model = 8\n",
            Path::new("."),
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
