//! Fixtures shared by the benchmarks.

use ndarray::Array2;
use rand::Rng;

use hoi_core::geometry::{BBox, Detection};
use hoi_core::model::{HeadConfig, Model};
use hoi_core::{seed, ActionRegistry};

/// `n` random detections in a 640×480 image; every fourth is a person.
pub fn detections(n: usize, seed_value: u64) -> Vec<Detection> {
    let mut rng = seed::rng(seed_value, &[]);
    (0..n)
        .map(|i| {
            let (w, h) = (rng.random_range(20.0..200.0), rng.random_range(20.0..200.0));
            let (x, y) = (rng.random_range(0.0..440.0), rng.random_range(0.0..280.0));
            let category = if i % 4 == 0 { 0 } else { 1 + i % 8 };
            Detection::new(BBox::new(x, y, x + w, y + h).expect("positive size"), category, rng.random_range(0.05..1.0))
        })
        .collect()
}

pub fn features(n: usize, dim: usize, seed_value: u64) -> Array2<f64> {
    let mut rng = seed::rng(seed_value, &[1]);
    Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.0..1.0))
}

/// Head sized for the V-COCO action set.
pub fn model(feature_dim: usize, hidden_dim: usize) -> Model {
    let reg = ActionRegistry::vcoco();
    let cfg = HeadConfig {
        feature_dim,
        hidden_dim,
        concat_hidden: hidden_dim,
        num_actions: reg.num_verbs(),
        num_target_slots: reg.num_slots(),
        num_object_classes: 9,
        ..HeadConfig::default()
    };
    Model::new(cfg, 1).expect("valid config")
}
