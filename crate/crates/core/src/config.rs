//! The experiment document: one JSON file describing data, optics, scenario,
//! model, training and algorithm. Every field has a desk-scale default, so
//! `{}` is a complete config.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{DataSource, DatasetSpec};
use crate::error::{Error, Result};
use crate::learncore::{BackboneConfig, LrSchedule, ModelSpec, PromptConfig};
use crate::optics::{
    DispersionModel, MaskDistribution, MaskPlacement, NoiseModel, ScenarioKind, ScenarioSpec,
};

/// Smallest spatial extent the SSIM window accepts.
pub const MIN_EVAL_EXTENT: usize = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Fedhp,
    Fedavg,
    Fedprox,
    Scaffold,
    Joint,
    LocalOnly,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::Fedhp,
        Algorithm::Fedavg,
        Algorithm::Fedprox,
        Algorithm::Scaffold,
        Algorithm::Joint,
        Algorithm::LocalOnly,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Fedhp => "fedhp",
            Algorithm::Fedavg => "fedavg",
            Algorithm::Fedprox => "fedprox",
            Algorithm::Scaffold => "scaffold",
            Algorithm::Joint => "joint",
            Algorithm::LocalOnly => "local-only",
        }
    }

    /// Prompt and adaptors on a frozen pre-trained backbone.
    pub fn uses_prompt(&self) -> bool {
        matches!(self, Algorithm::Fedhp | Algorithm::LocalOnly)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpticsConfig {
    pub dispersion: DispersionModel,
    pub noise: NoiseModel,
    pub mask_placement: MaskPlacement,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub blocks: usize,
    pub channels: usize,
    pub adaptor_hidden: usize,
    pub prompt_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            channels: 8,
            adaptor_hidden: 4,
            prompt_channels: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Global rounds T.
    pub rounds: usize,
    /// Prompt iterations per round S_p.
    pub prompt_iters: usize,
    /// Adaptor iterations per round S_b.
    pub adaptor_iters: usize,
    /// Local backbone pre-training iterations S_pre.
    pub pretrain_iters: usize,
    /// Local iterations per round for the whole-model baselines.
    pub local_iters: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_prompt: f64,
    pub lr_adaptor: f64,
    /// Iterations between learning-rate halvings.
    pub lr_period: u64,
    /// Clients per round C′; all clients when absent.
    pub participation: Option<usize>,
    pub prox_mu: f64,
    /// Fresh masks per client for the unseen-mask evaluation.
    pub eval_masks: usize,
    /// Cubes per split used for evaluation.
    pub eval_cubes: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            prompt_iters: 10,
            adaptor_iters: 10,
            pretrain_iters: 300,
            local_iters: 20,
            batch_size: 4,
            lr_backbone: 1e-3,
            lr_prompt: 1e-3,
            lr_adaptor: 1e-3,
            lr_period: 500,
            participation: None,
            prox_mu: 0.01,
            eval_masks: 2,
            eval_cubes: 4,
        }
    }
}

impl TrainingConfig {
    pub fn backbone_schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.lr_backbone,
            period: self.lr_period,
        }
    }

    pub fn prompt_schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.lr_prompt,
            period: self.lr_period,
        }
    }

    pub fn adaptor_schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.lr_adaptor,
            period: self.lr_period,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be >= 1".into()));
        }
        self.backbone_schedule().validate()?;
        self.prompt_schedule().validate()?;
        self.adaptor_schedule().validate()?;
        if !(self.prox_mu.is_finite() && self.prox_mu >= 0.0) {
            return Err(Error::Config(format!(
                "training.prox_mu {} must be >= 0",
                self.prox_mu
            )));
        }
        if self.participation == Some(0) {
            return Err(Error::Config("training.participation must be >= 1".into()));
        }
        if self.eval_cubes == 0 || self.eval_masks == 0 {
            return Err(Error::Config(
                "training.eval_cubes and training.eval_masks must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

fn default_data() -> DatasetSpec {
    DatasetSpec {
        source: DataSource::Synthetic,
        count: 24,
        height: 16,
        width: 16,
        bands: 4,
        split: 0.75,
        smoothness: 2.0,
        seed: None,
    }
}

fn default_scenario() -> ScenarioSpec {
    ScenarioSpec {
        kind: ScenarioKind::HardwareShaking,
        clients: 3,
        masks_per_client: 2,
        distributions: vec![MaskDistribution::Bernoulli { p: 0.5 }],
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DatasetSpec,
    pub optics: OpticsConfig,
    pub scenario: ScenarioSpec,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub algorithm: Algorithm,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: default_data(),
            optics: OpticsConfig::default(),
            scenario: default_scenario(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            algorithm: Algorithm::Fedhp,
            output_dir: default_output_dir(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a config document.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config schema: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.data.validate().map_err(cfg)?;
        self.scenario.validate().map_err(cfg)?;
        self.optics.noise.validate().map_err(cfg)?;
        self.optics
            .dispersion
            .validate(self.data.bands)
            .map_err(cfg)?;
        self.model_spec().backbone.validate().map_err(cfg)?;
        if self.model.prompt_channels == 0 {
            return Err(Error::Config("model.prompt_channels must be >= 1".into()));
        }
        self.training.validate().map_err(cfg)?;
        if self.data.height < MIN_EVAL_EXTENT || self.data.width < MIN_EVAL_EXTENT {
            return Err(Error::Config(format!(
                "data.height and data.width must be >= {MIN_EVAL_EXTENT} for SSIM evaluation"
            )));
        }
        let clients = self.scenario.clients;
        if self.data.train_count() < clients {
            return Err(Error::Config(format!(
                "{} training cubes cannot be split across {clients} clients",
                self.data.train_count()
            )));
        }
        if self.participants() > clients {
            return Err(Error::Config(format!(
                "training.participation {} exceeds {clients} clients",
                self.participants()
            )));
        }
        for d in &self.scenario.distributions {
            if let MaskDistribution::PerturbedReference { reference, .. } = d {
                if (reference.height(), reference.width()) != (self.data.height, self.data.width) {
                    return Err(Error::Config(
                        "perturbed-reference mask does not match data.height × data.width".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn participants(&self) -> usize {
        self.training.participation.unwrap_or(self.scenario.clients)
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            backbone: BackboneConfig {
                blocks: self.model.blocks,
                channels: self.model.channels,
                adaptor_hidden: self.model.adaptor_hidden,
                bands: self.data.bands,
            },
            prompt: PromptConfig {
                channels: self.model.prompt_channels,
            },
            dispersion: self.optics.dispersion,
        }
    }

    /// The config with every default spelled out.
    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the resolved document, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.resolved_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
