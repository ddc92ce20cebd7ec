//! Detection of ⟨human, verb, object⟩ triplets on top of per-box features.

pub mod dataset;
pub mod density;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod inference;
pub mod model;
pub mod seed;
pub mod trainer;

pub use dataset::{ActionRegistry, Dataset, Role, Scene, Schema, SynthConfig, VerbDef};
pub use error::*;
pub use eval::{evaluate, ApReport, EvalConfig};
pub use features::{FeatureProvider, FileProvider, SyntheticProvider};
pub use geometry::{decode_rel, encode_rel, iou, nms, BBox, Detection, RelOffset};
pub use inference::{InferenceConfig, ScoredTriplet, TargetScorer};
pub use model::{Checkpoint, DensityConfig, HeadConfig, LossReport, LossWeights, Model, PairwiseMode};
pub use trainer::{Schedule, TrainConfig};
