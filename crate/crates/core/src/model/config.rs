use serde::{Deserialize, Serialize};

use crate::density::{DEFAULT_SIGMA, DEFAULT_SIGMA_FLOOR};
use crate::error::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityKind {
    /// Predict a mean only; score with a fixed-width Gaussian, train with smooth L1.
    FixedSigma,
    /// Predict a diagonal Gaussian mixture; train by negative log-likelihood.
    Mixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairwiseMode {
    /// Per-box action logits of the two boxes are summed.
    LogitSum,
    /// The two trunk outputs are concatenated and fed to a one-hidden-layer MLP.
    ConcatMlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensityConfig {
    pub kind: DensityKind,
    /// Mixture components per target slot (1 for the fixed-width path).
    pub components: usize,
    /// Predict per-coordinate widths; otherwise every width is `sigma`.
    pub learn_sigma: bool,
    pub sigma: f64,
    pub sigma_floor: f64,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            kind: DensityKind::FixedSigma,
            components: 1,
            learn_sigma: false,
            sigma: DEFAULT_SIGMA,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
        }
    }
}

impl DensityConfig {
    pub fn fixed_sigma() -> Self {
        Self::default()
    }

    pub fn mixture(components: usize, learn_sigma: bool) -> Self {
        Self {
            kind: DensityKind::Mixture,
            components,
            learn_sigma,
            ..Self::default()
        }
    }

    pub fn has_weight_head(&self) -> bool {
        self.kind == DensityKind::Mixture && self.components > 1
    }

    pub fn has_sigma_head(&self) -> bool {
        self.kind == DensityKind::Mixture && self.learn_sigma
    }
}

/// Shape and behavior of the head network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub feature_dim: usize,
    /// Width of both trunk layers of every branch.
    pub hidden_dim: usize,
    /// Number of verbs (action classification outputs).
    pub num_actions: usize,
    /// Number of (verb, role) entries with a target, each with its own density.
    pub num_target_slots: usize,
    /// Object categories including `person`, excluding background.
    pub num_object_classes: usize,
    pub density: DensityConfig,
    pub use_interaction_branch: bool,
    pub pairwise_mode: PairwiseMode,
    pub concat_hidden: usize,
    /// Run object boxes through the human-centric trunk and action head in
    /// the interaction branch instead of a separate object-side trunk.
    pub share_interaction_heads: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            feature_dim: 256 * 7 * 7,
            hidden_dim: 1024,
            num_actions: 26,
            num_target_slots: 24,
            num_object_classes: 81,
            density: DensityConfig::default(),
            use_interaction_branch: true,
            pairwise_mode: PairwiseMode::LogitSum,
            concat_hidden: 512,
            share_interaction_heads: false,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.feature_dim == 0 || self.hidden_dim == 0 || self.concat_hidden == 0 {
            return bad("feature_dim, hidden_dim and concat_hidden must be positive");
        }
        if self.num_actions == 0 || self.num_object_classes == 0 {
            return bad("num_actions and num_object_classes must be positive");
        }
        let d = &self.density;
        if d.components == 0 || d.components > 4 {
            return bad("density components must be between 1 and 4");
        }
        if d.kind == DensityKind::FixedSigma && (d.components != 1 || d.learn_sigma) {
            return bad("the fixed_sigma density has one component and a fixed width");
        }
        if !(d.sigma > 0.0 && d.sigma.is_finite()) {
            return bad("density sigma must be positive");
        }
        if !(d.sigma_floor > 0.0 && d.sigma_floor.is_finite()) {
            return bad("density sigma_floor must be positive");
        }
        Ok(())
    }

    /// Outputs of the mean head: 4 per component per slot.
    pub fn mu_dim(&self) -> usize {
        4 * self.density.components * self.num_target_slots
    }
}
