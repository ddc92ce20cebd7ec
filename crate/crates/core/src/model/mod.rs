//! The head network: object, human-centric and interaction branches over
//! per-box features, with hand-written reverse-mode gradients.

mod checkpoint;
mod config;
mod layers;
mod loss;
mod params;

use ndarray::{concatenate, Array2, Axis};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{DensityConfig, DensityKind, HeadConfig, PairwiseMode};
pub use layers::{Linear, Trunk};
pub use loss::{
    batch_loss_and_grad, bce_loss, image_loss_and_grad, HumanSamples, ImageSamples, InteractionSamples,
    LossReport, LossWeights, ObjectSamples,
};
pub use params::{ModelParams, Sgd, OUTPUT_INIT_SCALE};

use crate::density::{sigmoid, softmax, MdnOutputs, Mixture};
use crate::error::ModelError;
use crate::geometry::RelOffset;
use crate::seed;
use layers::relu;

pub(crate) fn row(a: &Array2<f64>, i: usize) -> &[f64] {
    let n = a.ncols();
    &a.as_slice().expect("standard layout")[i * n..(i + 1) * n]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: HeadConfig,
    pub params: ModelParams,
}

/// Object-branch outputs for a set of boxes.
#[derive(Debug, Clone)]
pub struct ObjectOutputs {
    /// `N × (C + 1)`, background last.
    pub logits: Array2<f64>,
    /// `N × 4C` class-specific box deltas.
    pub deltas: Array2<f64>,
}

impl ObjectOutputs {
    pub fn len(&self) -> usize {
        self.logits.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Class probabilities of box `i` (softmax over categories and background).
    pub fn probs(&self, i: usize) -> Vec<f64> {
        softmax(row(&self.logits, i))
    }

    pub fn delta(&self, i: usize, class: usize) -> RelOffset {
        RelOffset::from_slice(&row(&self.deltas, i)[4 * class..4 * class + 4])
    }
}

/// Human-centric outputs for a set of person boxes.
#[derive(Debug, Clone)]
pub struct HumanOutputs {
    /// Trunk activations, reused by the concatenating pairwise head.
    pub trunk: Array2<f64>,
    pub action_logits: Array2<f64>,
    pub mu: Array2<f64>,
    pub weight_logits: Option<Array2<f64>>,
    pub raw_sigmas: Option<Array2<f64>>,
}

const UNIT_LOGIT: [f64; 1] = [0.0];

impl HumanOutputs {
    pub fn len(&self) -> usize {
        self.action_logits.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn action_scores(&self, i: usize) -> Vec<f64> {
        row(&self.action_logits, i).iter().map(|&l| sigmoid(l)).collect()
    }

    /// Raw density outputs of box `i` for target slot `slot`.
    pub fn slot<'a>(&'a self, i: usize, slot: usize, density: &DensityConfig) -> MdnOutputs<'a> {
        let m = density.components;
        MdnOutputs {
            weight_logits: match &self.weight_logits {
                Some(w) => &row(w, i)[slot * m..(slot + 1) * m],
                None => &UNIT_LOGIT,
            },
            means: &row(&self.mu, i)[4 * m * slot..4 * m * (slot + 1)],
            raw_sigmas: self
                .raw_sigmas
                .as_ref()
                .map(|r| &row(r, i)[4 * m * slot..4 * m * (slot + 1)]),
            sigma_floor: density.sigma_floor,
            fixed_sigma: density.sigma,
        }
    }

    pub fn mixture(&self, i: usize, slot: usize, density: &DensityConfig) -> Mixture {
        self.slot(i, slot, density).mixture()
    }

    /// Mean of the first component; the whole prediction on the fixed-width path.
    pub fn mean(&self, i: usize, slot: usize, density: &DensityConfig) -> RelOffset {
        let m = density.components;
        RelOffset::from_slice(&row(&self.mu, i)[4 * m * slot..4 * m * slot + 4])
    }
}

/// Per-box half of the interaction branch for candidate target boxes.
#[derive(Debug, Clone)]
pub struct ObjectSide {
    pub trunk: Array2<f64>,
    /// Action logits in logit-sum mode.
    pub logits: Option<Array2<f64>>,
}

impl Model {
    pub fn new(config: HeadConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = seed::rng(seed, &[0x1417]);
        let params = ModelParams::init(&config, &mut rng);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: HeadConfig, params: ModelParams) -> Result<Self, ModelError> {
        config.validate()?;
        if !ModelParams::zeros(&config).same_shapes(&params) {
            return Err(ModelError::Config("parameter shapes do not match the head config".into()));
        }
        Ok(Self { config, params })
    }

    fn check(&self, x: &Array2<f64>) -> Result<(), ModelError> {
        if x.ncols() != self.config.feature_dim {
            return Err(ModelError::Dimension {
                expected: self.config.feature_dim,
                got: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn forward_object(&self, x: &Array2<f64>) -> Result<ObjectOutputs, ModelError> {
        self.check(x)?;
        let p = &self.params;
        let t = p.obj_trunk.forward(x);
        Ok(ObjectOutputs {
            logits: p.obj_cls.forward(&t.h2),
            deltas: p.obj_reg.forward(&t.h2),
        })
    }

    pub fn forward_human(&self, x: &Array2<f64>) -> Result<HumanOutputs, ModelError> {
        self.check(x)?;
        let p = &self.params;
        let t = p.hum_trunk.forward(x);
        Ok(HumanOutputs {
            action_logits: p.hum_act.forward(&t.h2),
            mu: p.hum_mu.forward(&t.h2),
            weight_logits: p.hum_wlogit.as_ref().map(|l| l.forward(&t.h2)),
            raw_sigmas: p.hum_sigma.as_ref().map(|l| l.forward(&t.h2)),
            trunk: t.h2,
        })
    }

    /// `None` when the interaction branch is disabled.
    pub fn forward_object_side(&self, x: &Array2<f64>) -> Result<Option<ObjectSide>, ModelError> {
        self.check(x)?;
        if !self.config.use_interaction_branch {
            return Ok(None);
        }
        let p = &self.params;
        let (trunk, act) = match (&p.int_trunk, &p.int_act) {
            (Some(t), a) => (t, a.as_ref()),
            (None, _) => (&p.hum_trunk, Some(&p.hum_act)),
        };
        let h = trunk.forward(x).h2;
        let logits = match self.config.pairwise_mode {
            PairwiseMode::LogitSum => Some(act.expect("logit-sum head").forward(&h)),
            PairwiseMode::ConcatMlp => None,
        };
        Ok(Some(ObjectSide { trunk: h, logits }))
    }

    /// Interaction scores of human `hi` with candidate `oi`, one per verb.
    pub fn pair_scores(&self, human: &HumanOutputs, hi: usize, side: &ObjectSide, oi: usize) -> Vec<f64> {
        match self.config.pairwise_mode {
            PairwiseMode::LogitSum => {
                let lo = row(side.logits.as_ref().expect("logit-sum side"), oi);
                row(&human.action_logits, hi)
                    .iter()
                    .zip(lo)
                    .map(|(a, b)| sigmoid(a + b))
                    .collect()
            }
            PairwiseMode::ConcatMlp => {
                let z = concatenate(
                    Axis(1),
                    &[
                        human.trunk.row(hi).insert_axis(Axis(0)),
                        side.trunk.row(oi).insert_axis(Axis(0)),
                    ],
                )
                .expect("matching rows");
                let p = &self.params;
                let a = relu(p.pair_fc1.as_ref().expect("pair head").forward(&z));
                let l = p.pair_fc2.as_ref().expect("pair head").forward(&a);
                l.iter().map(|&v| sigmoid(v)).collect()
            }
        }
    }

    /// Scores for row-aligned (human, object) feature pairs.
    pub fn forward_interaction(&self, xh: &Array2<f64>, xo: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        let h = self.forward_human(xh)?;
        let Some(side) = self.forward_object_side(xo)? else {
            return Err(ModelError::Config("interaction branch is disabled".into()));
        };
        let n = xh.nrows();
        let mut out = Array2::zeros((n, self.config.num_actions));
        for i in 0..n {
            for (j, s) in self.pair_scores(&h, i, &side, i).into_iter().enumerate() {
                out[[i, j]] = s;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
