use std::path::Path;

use serde::{Deserialize, Serialize};

use hoi_core::eval::EvalConfig;
use hoi_core::inference::InferenceConfig;
use hoi_core::model::{DensityConfig, HeadConfig, PairwiseMode};
use hoi_core::seed;
use hoi_core::trainer::{Phase, Schedule, TrainConfig};
use hoi_core::SynthConfig;

use crate::error::{CliError, Kind};

/// Which target-location model a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum DensityMode {
    /// Single Gaussian of fixed width around the predicted offset.
    FixedSigma,
    /// One learned-width Gaussian.
    MdnM1,
    /// Two-component mixture with learned widths.
    MdnM2,
    /// Trained like `fixed_sigma`; scored with per-action k-means centers.
    KmeansBaseline,
}

impl DensityMode {
    pub fn density(self) -> DensityConfig {
        match self {
            DensityMode::FixedSigma | DensityMode::KmeansBaseline => DensityConfig::fixed_sigma(),
            DensityMode::MdnM1 => DensityConfig::mixture(1, true),
            DensityMode::MdnM2 => DensityConfig::mixture(2, true),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum PairwiseArg {
    LogitSum,
    ConcatMlp,
}

impl From<PairwiseArg> for PairwiseMode {
    fn from(p: PairwiseArg) -> Self {
        match p {
            PairwiseArg::LogitSum => PairwiseMode::LogitSum,
            PairwiseArg::ConcatMlp => PairwiseMode::ConcatMlp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    /// Training split; its `seed` and `first_image_id` are set by the run.
    pub train: SynthConfig,
    pub test_scenes: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            train: SynthConfig {
                scenes: 2000,
                ..SynthConfig::default()
            },
            test_scenes: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSection {
    /// Extra zero-code dimensions beyond the minimum the dataset needs.
    pub padding: usize,
    /// Std-dev of the noise added to synthetic features.
    pub noise: f64,
}

impl Default for FeatureSection {
    fn default() -> Self {
        Self {
            padding: 4,
            noise: 0.1,
        }
    }
}

/// Everything a subcommand reads. Every field has a default; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives every stochastic component; section seeds are derived from it.
    pub seed: u64,
    pub synth: SynthSection,
    pub features: FeatureSection,
    /// `feature_dim`, `num_actions`, `num_target_slots` and
    /// `num_object_classes` are taken from the data.
    pub head: HeadConfig,
    /// Overrides `head.density` when set.
    pub density_mode: Option<DensityMode>,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
    pub kmeans_k: usize,
    /// Write an intermediate checkpoint every this many iterations (0: never).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthSection::default(),
            features: FeatureSection::default(),
            head: HeadConfig {
                hidden_dim: 64,
                concat_hidden: 64,
                ..HeadConfig::default()
            },
            density_mode: None,
            train: TrainConfig {
                schedule: Schedule {
                    phases: vec![
                        Phase {
                            iterations: 4000,
                            lr: 0.01,
                        },
                        Phase {
                            iterations: 1000,
                            lr: 0.001,
                        },
                    ],
                    images_per_step: 16,
                },
                ..TrainConfig::default()
            },
            inference: InferenceConfig::default(),
            eval: EvalConfig::default(),
            kmeans_k: hoi_core::density::DEFAULT_KMEANS_K,
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::new(Kind::Io, format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::new(Kind::Config, format!("{}: {e}", path.display())))
    }

    /// Push the top-level seed and the density mode into the sections.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        self.train.seed = seed::derive(self.seed, &[0x7A1]);
        self.synth.train.seed = seed::derive(self.seed, &[0x5E7]);
        self.synth.train.first_image_id = 0;
        if let Some(m) = self.density_mode {
            self.head.density = m.density();
        }
        self.train
            .schedule
            .validate()
            .map_err(|e| CliError::new(Kind::Config, e.to_string()))?;
        if self.kmeans_k == 0 {
            return Err(CliError::new(Kind::Config, "kmeans_k must be positive"));
        }
        Ok(self)
    }

    pub fn test_synth(&self) -> SynthConfig {
        SynthConfig {
            scenes: self.synth.test_scenes,
            seed: seed::derive(self.seed, &[0x7E57]),
            first_image_id: 1_000_000,
            ..self.synth.train.clone()
        }
    }

    pub fn kmeans_seed(&self) -> u64 {
        seed::derive(self.seed, &[0xB45E])
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
