//! JSON run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::DType;
use crate::model::ModelConfig;
use crate::training::{OptimizerConfig, ToyCorpusConfig, TrainOptions};

pub const SEED_ENV: &str = "FASTMEL_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
    Tiny,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DTypeName {
    F32,
    #[default]
    F64,
}

impl From<DTypeName> for DType {
    fn from(d: DTypeName) -> Self {
        match d {
            DTypeName::F32 => DType::F32,
            DTypeName::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub steps: u64,
    pub lambda: f64,
    pub batch_size: Option<usize>,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig { steps: 1000, lambda: 1.0, batch_size: None }
    }
}

/// Synthetic corpus shape; vocabulary size and mel dimension follow the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub samples: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub max_duration: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let d = ToyCorpusConfig::default();
        CorpusSection { samples: d.samples, min_len: d.min_len, max_len: d.max_len, max_duration: d.max_duration }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Used when `model` is absent.
    pub preset: Preset,
    pub model: Option<ModelConfig>,
    /// Defaults to the student's configuration.
    pub teacher_model: Option<ModelConfig>,
    /// Defaults to β₁ 0.9, β₂ 0.98, ε 1e-9, warmup 400 at the model width.
    pub optimizer: Option<OptimizerConfig>,
    pub train: StageConfig,
    pub teacher_train: StageConfig,
    pub corpus: CorpusSection,
    pub manifest: Option<PathBuf>,
    pub teacher_checkpoint: Option<PathBuf>,
    pub student_checkpoint: Option<PathBuf>,
    pub dtype: DTypeName,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.teacher_config().validate()?;
        self.optimizer_config().validate()?;
        for (name, stage) in [("train", &self.train), ("teacher_train", &self.teacher_train)] {
            if !(stage.lambda >= 0.0 && stage.lambda.is_finite()) {
                return Err(Error::config(format!("{name}.lambda must be finite and non-negative")));
            }
            if stage.batch_size == Some(0) {
                return Err(Error::config(format!("{name}.batch_size must be positive")));
            }
        }
        let c = &self.corpus;
        if c.min_len == 0 || c.min_len > c.max_len {
            return Err(Error::config("corpus.min_len must be in 1..=corpus.max_len"));
        }
        if c.max_duration == 0 {
            return Err(Error::config("corpus.max_duration must be positive"));
        }
        Ok(())
    }

    pub fn use_paper_preset(&mut self) {
        self.preset = Preset::Paper;
        self.model = None;
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.clone().unwrap_or_else(|| match self.preset {
            Preset::Desk => ModelConfig::desk(),
            Preset::Paper => ModelConfig::paper(),
            Preset::Tiny => ModelConfig::tiny(),
        })
    }

    pub fn teacher_config(&self) -> ModelConfig {
        self.teacher_model.clone().unwrap_or_else(|| self.model_config())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        self.optimizer.clone().unwrap_or_else(|| OptimizerConfig::for_model(self.model_config().d_model))
    }

    pub fn teacher_optimizer_config(&self) -> OptimizerConfig {
        self.optimizer.clone().unwrap_or_else(|| OptimizerConfig::for_model(self.teacher_config().d_model))
    }

    pub fn corpus_config(&self) -> ToyCorpusConfig {
        let m = self.model_config();
        ToyCorpusConfig {
            samples: self.corpus.samples,
            min_len: self.corpus.min_len,
            max_len: self.corpus.max_len,
            vocab_size: m.vocab_size,
            mel_dim: m.mel_dim,
            max_duration: self.corpus.max_duration,
            seed: self.seed,
        }
    }

    pub fn train_options(&self, stage: &StageConfig, steps: Option<u64>) -> TrainOptions {
        TrainOptions {
            steps: steps.unwrap_or(stage.steps),
            seed: self.seed,
            lambda: stage.lambda,
            batch_size: stage.batch_size,
        }
    }

    /// Replaces the seed with `FASTMEL_SEED` when that variable is set.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_desk_defaults() {
        let c = RunConfig::parse("{}").unwrap();
        assert_eq!(c.model_config(), ModelConfig::desk());
        assert_eq!(c.optimizer_config().warmup_steps, 400);
        assert_eq!(c.corpus_config().samples, 32);
    }

    #[test]
    fn unknown_field_is_named() {
        let err = RunConfig::parse(r#"{"sed": 3}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("sed"), "{err}");
        let err = RunConfig::parse(r#"{"train": {"step": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("step"), "{err}");
    }

    #[test]
    fn invalid_model_field_is_named() {
        let mut m = serde_json::to_value(ModelConfig::desk()).unwrap();
        m["n_heads"] = 3.into();
        let text = serde_json::json!({ "model": m }).to_string();
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(err.to_string().contains("n_heads"), "{err}");
    }

    #[test]
    fn seed_override() {
        let mut c = RunConfig::default();
        c.apply_seed_override(Some("42")).unwrap();
        assert_eq!(c.seed, 42);
        c.apply_seed_override(None).unwrap();
        assert_eq!(c.seed, 42);
        assert!(matches!(c.apply_seed_override(Some("x")), Err(Error::Config(_))));
    }

    #[test]
    fn paper_preset() {
        let mut c = RunConfig::default();
        c.use_paper_preset();
        assert_eq!(c.model_config().d_model, 384);
        assert_eq!(c.optimizer_config().d_model_for_schedule, 384);
    }
}
