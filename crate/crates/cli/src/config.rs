use std::path::{Path, PathBuf};

use msrt_core::datagen::{GenConfig, N_CLASSES};
use msrt_core::dsp::FilterSpec;
use msrt_core::train::TrainConfig;
use msrt_core::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSettings {
    pub per_class: usize,
    pub seed: u64,
    pub waveform: GenConfig,
}

impl Default for GeneratorSettings {
    fn default() -> Self {
        GeneratorSettings {
            per_class: 200,
            seed: 0,
            waveform: GenConfig::default(),
        }
    }
}

/// Default file locations; command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSettings {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

/// Everything a run depends on. Serialized into every artifact.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub filter: FilterSpec,
    pub generator: GeneratorSettings,
    pub paths: PathSettings,
}

impl RunConfig {
    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// Reads and validates a config file. Artifact JSON (sidecars,
    /// reports) is accepted too; its embedded `run_config` is used.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::syntax(path, e))?;
        if doc.get("kind").is_some_and(serde_json::Value::is_string) {
            if let Some(inner) = doc.get_mut("run_config") {
                doc = inner.take();
            }
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| CliError::syntax(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets the generator, initialization and shuffling seeds together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.generator.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.filter.validate()?;
        self.generator.waveform.validate()?;
        if self.model.n_classes != N_CLASSES {
            return Err(CliError::Validation(format!(
                "model.n_classes is {} but the label set has {N_CLASSES} classes",
                self.model.n_classes
            )));
        }
        if self.model.input_len != self.generator.waveform.input_len {
            return Err(CliError::Validation(format!(
                "model.input_len {} differs from generator.waveform.input_len {}",
                self.model.input_len, self.generator.waveform.input_len
            )));
        }
        if self.generator.per_class == 0 {
            return Err(CliError::Validation("generator.per_class must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("RunConfig serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_json(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 10);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        assert!(RunConfig::from_json(r#"{"trian": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"epoch": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"generator": {"waveform": {"len": 3}}}"#).is_err());
    }

    #[test]
    fn mismatched_lengths_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.generator.waveform.input_len = 800;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 1);
    }

    #[test]
    fn seed_applies_everywhere() {
        let cfg = RunConfig::default().with_seed(9);
        assert_eq!((cfg.generator.seed, cfg.model.seed, cfg.train.seed), (9, 9, 9));
    }
}
