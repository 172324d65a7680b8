use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ExperimentError, Variant};
use crate::solver::ModelConfig;
use crate::synth::SynthConfig;
use crate::training::{KnowledgeConfig, TrainConfig, TrainSettings};

/// Where problems come from: a corpus directory, or the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `train.jsonl`, `valid.jsonl`, `test.jsonl` and
    /// optionally `kg.json`. When unset the corpus is generated in memory.
    pub dir: Option<PathBuf>,
    pub synth: SynthConfig,
    /// Generator seed; independent of the training seeds.
    pub seed: u64,
    pub min_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            synth: SynthConfig::default(),
            seed: 1,
            min_count: 1,
        }
    }
}

/// Settings of the supervised link-prediction baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LpConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Sampled non-edges per known edge, redrawn every epoch.
    pub negatives: usize,
}

impl Default for LpConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.01,
            negatives: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// Cut-off for word–word precision.
    pub k: usize,
    /// Cut-off for word–operator precision.
    pub k_wo: usize,
    pub variants: Vec<Variant>,
    pub alphas: Vec<f64>,
    pub lp: LpConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            k: 20,
            k_wo: 12,
            variants: vec![Variant::Full, Variant::NoSe, Variant::NoRe, Variant::Ek],
            alphas: vec![0.0, 0.2, 0.4, 0.6],
            lp: LpConfig::default(),
        }
    }
}

/// The single document every command reads.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub knowledge: KnowledgeConfig,
    pub train: TrainSettings,
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let config: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file. A relative `data.dir` is taken relative to the
    /// file and made absolute.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Io(path.display().to_string(), e))?;
        let mut config = Self::from_toml(&text)?;
        if let Some(dir) = config.data.dir.as_mut().filter(|d| d.is_relative()) {
            let base = path.parent().unwrap_or(Path::new("."));
            let joined = base.join(&*dir);
            *dir = std::path::absolute(&joined).map_err(|e| ExperimentError::Io(joined.display().to_string(), e))?;
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the resolved config as `config.toml` inside `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf, ExperimentError> {
        std::fs::create_dir_all(dir).map_err(|e| ExperimentError::Io(dir.display().to_string(), e))?;
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()).map_err(|e| ExperimentError::Io(path.display().to_string(), e))?;
        Ok(path)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            knowledge: self.knowledge.clone(),
            train: self.train.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.train_config().validate()?;
        let e = &self.experiment;
        if e.k == 0 || e.k_wo == 0 {
            return Err(ExperimentError::Config("precision cut-offs must be at least 1".into()));
        }
        if let Some(a) = e.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(ExperimentError::Config(format!("alpha {a} outside [0, 1]")));
        }
        if e.lp.negatives == 0 || e.lp.lr <= 0.0 {
            return Err(ExperimentError::Config("lp needs negatives >= 1 and a positive learning rate".into()));
        }
        Ok(())
    }
}

pub const RESOLVED_CONFIG: &str = "config.toml";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_data_dir_follows_the_file() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("c.toml");
        std::fs::write(&path, "[data]\ndir = \"corpus\"\n").unwrap();
        let c = RunConfig::load(&path).unwrap();
        let dir = c.data.dir.unwrap();
        assert!(dir.is_absolute());
        assert!(dir.ends_with("corpus"));
        assert!(dir.starts_with(std::path::absolute(tmp.path()).unwrap()));
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.data.dir = Some("data".into());
        c.experiment.alphas = vec![0.0, 0.5];
        c.experiment.variants = vec![Variant::Backbone, Variant::NoRe];
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["bogus = 1", "[train]\nepoch = 3", "[experiment.lp]\nnegative = 2", "[data.synth]\nwords = 3"] {
            assert!(matches!(RunConfig::from_toml(text), Err(ExperimentError::Config(_))), "{text}");
        }
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = RunConfig::from_toml("[train]\nepochs = 3\n[knowledge]\nalpha = 0.4\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, TrainSettings::default().batch_size);
        assert_eq!(c.knowledge.alpha, 0.4);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[experiment]\nalphas = [1.5]").is_err());
        assert!(RunConfig::from_toml("[experiment]\nk = 0").is_err());
        assert!(RunConfig::from_toml("[knowledge]\ntau_end = 0.0").is_err());
    }

    #[test]
    fn variant_names_parse() {
        let c = RunConfig::from_toml("[experiment]\nvariants = [\"full\", \"no_SE\", \"no_RE\", \"EK\", \"backbone\"]").unwrap();
        assert_eq!(c.experiment.variants.len(), 5);
    }
}
