//! Run configuration shared by every pipeline command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{AugMixConfig, AugOp};
use crate::classifier::{ClassifierTrainConfig, CnnArch};
use crate::dataset::Split;
use crate::embedding::ProviderDescriptor;
use crate::error::{Error, Result};
use crate::explain::ExplainOptions;
use crate::pim::{Aggregation, PimConfig, PimInit};
use crate::scenario::{ImbalanceSpec, InputCorruptionSpec, SpuriousSpec};
use crate::scoring::ScorerId;
use crate::training::{LossWeightPolicy, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Spurious(SpuriousSpec),
    Imbalanced(ImbalanceSpec),
    /// A dataset directory written earlier by `gen-scenario`.
    Path {
        dir: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSection {
    pub source: DatasetSource,
    /// Corrupts the test split only; training and calibration stay clean.
    #[serde(default)]
    pub test_corruption: Option<InputCorruptionSpec>,
}

fn default_ensemble_size() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSection {
    /// Defaults to the desk CNN sized for the dataset.
    #[serde(default)]
    pub arch: Option<CnnArch>,
    #[serde(default)]
    pub train: ClassifierTrainConfig,
    /// Members of the GDE ensemble, each trained from its own seed.
    #[serde(default = "default_ensemble_size")]
    pub ensemble_size: usize,
    /// Use an existing checkpoint instead of training one.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            arch: None,
            train: ClassifierTrainConfig::default(),
            ensemble_size: default_ensemble_size(),
            checkpoint: None,
        }
    }
}

fn default_top_k() -> usize {
    3
}

fn default_max_samples() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainSection {
    #[serde(default)]
    pub options: ExplainOptions,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Samples to explain; when empty, the first `max_samples` test samples
    /// on which the classifier and the PIM disagree.
    #[serde(default)]
    pub sample_ids: Vec<String>,
    #[serde(default = "default_max_samples")]
    pub max_samples: usize,
}

impl Default for ExplainSection {
    fn default() -> Self {
        Self {
            options: ExplainOptions::default(),
            top_k: default_top_k(),
            sample_ids: Vec::new(),
            max_samples: default_max_samples(),
        }
    }
}

fn default_ablation_count() -> usize {
    5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSection {
    /// Phrases added per class (irrelevant) or removed per class (insufficient).
    #[serde(default = "default_ablation_count")]
    pub count: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { count: default_ablation_count() }
    }
}

fn default_scorers() -> Vec<ScorerId> {
    ScorerId::ALL.to_vec()
}

fn default_energy_temperature() -> f64 {
    1.0
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Not part of the fingerprint.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub classifier: ClassifierSection,
    pub provider: ProviderDescriptor,
    /// Attribute bank JSON; the built-in shape bank when absent.
    #[serde(default)]
    pub bank: Option<PathBuf>,
    pub pim: PimConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss_weights: LossWeightPolicy,
    #[serde(default = "default_scorers")]
    pub scorers: Vec<ScorerId>,
    #[serde(default = "default_energy_temperature")]
    pub energy_temperature: f64,
    #[serde(default)]
    pub explain: ExplainSection,
    #[serde(default)]
    pub ablation: AblationSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::MissingArtifact(format!("config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        let seed = cfg.seed;
        cfg.set_seed(seed);
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Sets the global seed and every seed derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        match &mut self.dataset.source {
            DatasetSource::Spurious(s) => s.seed = seed,
            DatasetSource::Imbalanced(s) => s.seed = seed,
            DatasetSource::Path { .. } => {}
        }
        if let Some(c) = &mut self.dataset.test_corruption {
            c.seed = seed;
        }
        self.classifier.train.seed = seed;
        self.pim.init = match self.pim.init {
            PimInit::Pretrained { .. } => PimInit::Pretrained { seed },
            PimInit::Random { .. } => PimInit::Random { seed },
        };
        self.train.seed = seed;
    }

    /// Checks everything that can be checked before any work starts,
    /// including that referenced input files exist.
    pub fn validate(&self) -> Result<()> {
        match &self.dataset.source {
            DatasetSource::Spurious(s) => s.validate()?,
            DatasetSource::Imbalanced(s) => s.validate()?,
            DatasetSource::Path { dir } => require_path(dir, "dataset directory")?,
        }
        if let Some(c) = &self.dataset.test_corruption {
            if !(1..=5).contains(&c.severity) {
                return Err(Error::validation(format!("corruption severity {} outside 1..=5", c.severity)));
            }
        }
        if let Some(arch) = &self.classifier.arch {
            arch.validate()?;
        }
        if let Some(p) = &self.classifier.checkpoint {
            require_path(p, "classifier checkpoint")?;
        }
        if self.classifier.train.epochs == 0 {
            return Err(Error::validation("classifier epochs must be positive"));
        }
        if self.scorers.contains(&ScorerId::Gde) && self.classifier.ensemble_size < 2 {
            return Err(Error::validation("the gde scorer needs an ensemble of at least 2"));
        }
        self.provider.validate()?;
        if let Some(p) = &self.bank {
            require_path(p, "attribute bank")?;
        }
        if self.pim.latent_dim != self.provider.dim {
            return Err(Error::validation(format!(
                "pim.latent_dim {} differs from provider dim {}",
                self.pim.latent_dim, self.provider.dim
            )));
        }
        self.train.validate()?;
        self.loss_weights.validate()?;
        if self.scorers.is_empty() {
            return Err(Error::validation("no scorers requested"));
        }
        if !(self.energy_temperature > 0.0 && self.energy_temperature.is_finite()) {
            return Err(Error::validation("energy_temperature must be positive"));
        }
        if self.explain.top_k == 0 {
            return Err(Error::validation("explain.top_k must be positive"));
        }
        if self.ablation.count == 0 {
            return Err(Error::validation("ablation.count must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (sorted keys, no whitespace) with
    /// `out_dir` left out.
    pub fn fingerprint(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out_dir");
        }
        Ok(hex::encode(Sha256::digest(serde_json::to_string(&v)?.as_bytes())))
    }

    /// The desk-scale spurious-background experiment: a small CNN trained on
    /// shapes whose background colour follows the label 95% of the time, and
    /// a PIM trained with the built-in shape bank and a planted synthetic
    /// embedding space.
    pub fn spurious_fixture(seed: u64) -> Self {
        let dim = 64;
        let mut provider = ProviderDescriptor::synthetic(dim, 0);
        provider.planted = Some("shapes".into());
        let mut cfg = RunConfig {
            seed,
            out_dir: default_out_dir(),
            dataset: DatasetSection { source: DatasetSource::Spurious(SpuriousSpec::default()), test_corruption: None },
            classifier: ClassifierSection {
                train: ClassifierTrainConfig { epochs: 40, ..ClassifierTrainConfig::default() },
                ..ClassifierSection::default()
            },
            provider,
            bank: None,
            pim: PimConfig {
                tap_layer: "block1".into(),
                latent_dim: dim,
                aggregation: Aggregation::Mean,
                init: PimInit::Random { seed },
                temperature: 1.0,
            },
            train: TrainConfig {
                epochs: 60,
                lr: 0.01,
                lr_decay_epochs: vec![36, 48],
                aug_prob_cutmix: 0.2,
                aug_prob_augmix: 0.8,
                augmix: AugMixConfig { ops: vec![AugOp::ChannelShuffle, AugOp::Grayscale], ..AugMixConfig::default() },
                ..TrainConfig::default()
            },
            loss_weights: LossWeightPolicy::default(),
            scorers: default_scorers(),
            energy_temperature: 1.0,
            explain: ExplainSection::default(),
            ablation: AblationSection::default(),
        };
        cfg.set_seed(seed);
        cfg
    }
}

fn require_path(p: &Path, what: &str) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(format!("{what} {}", p.display())))
    }
}

/// Split used to calibrate thresholds.
pub const CALIBRATION_SPLIT: Split = Split::Val;
/// Split the detectors are evaluated on.
pub const EVALUATION_SPLIT: Split = Split::Test;
