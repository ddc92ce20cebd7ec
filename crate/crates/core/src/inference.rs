//! Cascaded inference: detect boxes, run the per-box heads once per
//! detection, then pick the best target per (human, action entry).

use std::io::Write;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ActionRegistry, Dataset, Role, Scene};
use crate::density::{gaussian_compat, kmeans, kmeans_compat, mixture_compat, DEFAULT_SIGMA};
use crate::error::{FeatureError, InferenceError};
use crate::features::FeatureProvider;
use crate::geometry::{decode_rel, encode_rel, nms, BBox, Detection, RelOffset};
use crate::model::{DensityKind, HumanOutputs, Model, ObjectOutputs, ObjectSide};
use crate::seed;
use crate::trainer::slot_offsets;

/// Category index of people in every dataset.
pub const PERSON_CATEGORY: usize = 0;
pub const DEFAULT_SCORE_THRESH: f64 = 0.05;
pub const DEFAULT_NMS_THRESH: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Detections must score strictly above this.
    pub score_thresh: f64,
    pub nms_thresh: f64,
    /// Width of the fixed-width compatibility term.
    pub sigma: f64,
    /// Triplets kept per image, by descending score.
    pub max_triplets: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            score_thresh: DEFAULT_SCORE_THRESH,
            nms_thresh: DEFAULT_NMS_THRESH,
            sigma: DEFAULT_SIGMA,
            max_triplets: 100,
        }
    }
}

/// How the target-location term is computed.
#[derive(Debug, Clone, Copy)]
pub enum TargetScorer<'a> {
    /// The density predicted from the person's features.
    Model,
    /// Appearance-blind: best fixed-width score over per-slot cluster centers.
    KMeans(&'a [Vec<RelOffset>]),
    /// No localization term (`g = 1`).
    Uniform,
}

/// One ⟨human, action, target⟩ prediction with its score components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredTriplet {
    pub image_id: u64,
    /// Index of the human among the image's detections.
    pub human_index: usize,
    pub human_box: BBox,
    pub human_score: f64,
    pub action: String,
    pub role: Role,
    #[serde(default)]
    pub object_box: Option<BBox>,
    #[serde(default)]
    pub object_category: Option<usize>,
    #[serde(default)]
    pub object_score: Option<f64>,
    /// Interaction score for targeted entries when that branch is on,
    /// human-centric action score otherwise.
    pub action_score: f64,
    #[serde(default)]
    pub compat: Option<f64>,
    pub score: f64,
}

impl ScoredTriplet {
    /// Product of the stored components, in the order the score is formed.
    pub fn component_product(&self) -> f64 {
        match (self.object_score, self.compat) {
            (Some(so), Some(g)) => triplet_score(self.human_score, so, self.action_score, g),
            _ => self.human_score * self.action_score,
        }
    }
}

/// `s_h · s_o · s_a · g`, always multiplied in this order so that every
/// caller gets bit-identical values.
pub fn triplet_score(s_h: f64, s_o: f64, s_a: f64, g: f64) -> f64 {
    s_h * s_o * s_a * g
}

/// Counts of network work done by the cascade.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CascadeStats {
    /// Boxes passed through the per-box heads.
    pub roi_evaluations: usize,
    /// (human, candidate) pairs combined by the pairwise scorer.
    pub pair_evaluations: usize,
}

/// Per-box head outputs for every detection of an image.
pub struct RoiOutputs {
    persons: Vec<usize>,
    /// Row `k` belongs to detection `persons[k]`.
    human: Option<HumanOutputs>,
    side: Option<ObjectSide>,
}

/// Run the per-box heads once for each detection.
pub fn evaluate_rois(
    model: &Model,
    detections: &[Detection],
    features: &Array2<f64>,
    stats: &mut CascadeStats,
) -> Result<RoiOutputs, InferenceError> {
    let persons: Vec<usize> = (0..detections.len())
        .filter(|&i| detections[i].category == PERSON_CATEGORY)
        .collect();
    let human = if persons.is_empty() {
        None
    } else {
        let x = features.select(ndarray::Axis(0), &persons);
        Some(model.forward_human(&x)?)
    };
    let side = if detections.is_empty() {
        None
    } else {
        model.forward_object_side(features)?
    };
    stats.roi_evaluations += detections.len();
    Ok(RoiOutputs { persons, human, side })
}

fn compat(
    model: &Model,
    scorer: TargetScorer<'_>,
    sigma: f64,
    human: &HumanOutputs,
    k: usize,
    slot: usize,
    b_rel: &RelOffset,
) -> f64 {
    match scorer {
        TargetScorer::Uniform => 1.0,
        TargetScorer::KMeans(centers) => kmeans_compat(b_rel, &centers[slot], sigma),
        TargetScorer::Model => {
            let d = &model.config.density;
            match d.kind {
                DensityKind::FixedSigma => gaussian_compat(b_rel, &human.mean(k, slot, d), sigma),
                DensityKind::Mixture => mixture_compat(b_rel, &human.mixture(k, slot, d)),
            }
        }
    }
}

/// Where the model expects the target of `slot` for person row `k`: the
/// mean of the heaviest component.
pub fn predicted_target(model: &Model, human: &HumanOutputs, k: usize, slot: usize) -> RelOffset {
    let d = &model.config.density;
    let mix = human.mixture(k, slot, d);
    mix.means[mix.dominant()]
}

/// Result of the cascade on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeOutput {
    /// Sorted by descending score, capped at `max_triplets`.
    pub triplets: Vec<ScoredTriplet>,
    /// Predicted target box per (human detection, targeted entry), for overlays.
    pub target_boxes: Vec<(usize, usize, BBox)>,
    pub stats: CascadeStats,
}

/// Score every (detected human, action entry) and select its best target.
pub fn cascade(
    model: &Model,
    registry: &ActionRegistry,
    image_id: u64,
    detections: &[Detection],
    features: &Array2<f64>,
    cfg: &InferenceConfig,
    scorer: TargetScorer<'_>,
) -> Result<CascadeOutput, InferenceError> {
    let mut stats = CascadeStats::default();
    let rois = evaluate_rois(model, detections, features, &mut stats)?;
    let mut triplets = Vec::new();
    let mut target_boxes = Vec::new();
    let Some(human) = &rois.human else {
        return Ok(CascadeOutput {
            triplets,
            target_boxes,
            stats,
        });
    };
    for (k, &hi) in rois.persons.iter().enumerate() {
        let hd = &detections[hi];
        let s_h = hd.score;
        let act = human.action_scores(k);
        // pairwise scores are shared by every entry of the human
        let mut pair_cache: Vec<Option<Vec<f64>>> = vec![None; detections.len()];
        for (e, spec) in registry.entries().iter().enumerate() {
            let s_a = act[spec.verb];
            let base = ScoredTriplet {
                image_id,
                human_index: hi,
                human_box: hd.bbox,
                human_score: s_h,
                action: spec.name.clone(),
                role: spec.role,
                object_box: None,
                object_category: None,
                object_score: None,
                action_score: s_a,
                compat: None,
                score: s_h * s_a,
            };
            let Some(slot) = spec.slot else {
                triplets.push(base);
                continue;
            };
            if let Ok(b) = decode_rel(&predicted_target(model, human, k, slot), &hd.bbox) {
                target_boxes.push((hi, e, b));
            }
            let mut best: Option<ScoredTriplet> = None;
            for (j, od) in detections.iter().enumerate() {
                if j == hi || (od.category == PERSON_CATEGORY && !spec.person_targets) {
                    continue;
                }
                let a = match &rois.side {
                    Some(side) => {
                        if pair_cache[j].is_none() {
                            pair_cache[j] = Some(model.pair_scores(human, k, side, j));
                            stats.pair_evaluations += 1;
                        }
                        pair_cache[j].as_ref().expect("filled")[spec.verb]
                    }
                    None => s_a,
                };
                let b_rel = encode_rel(&od.bbox, &hd.bbox);
                let g = compat(model, scorer, cfg.sigma, human, k, slot, &b_rel);
                let s = triplet_score(s_h, od.score, a, g);
                if best.as_ref().is_none_or(|b| s > b.score) {
                    best = Some(ScoredTriplet {
                        object_box: Some(od.bbox),
                        object_category: Some(od.category),
                        object_score: Some(od.score),
                        action_score: a,
                        compat: Some(g),
                        score: s,
                        ..base.clone()
                    });
                }
            }
            triplets.extend(best);
        }
    }
    sort_and_cap(&mut triplets, cfg.max_triplets);
    Ok(CascadeOutput {
        triplets,
        target_boxes,
        stats,
    })
}

/// Stable sort by descending score, then keep the first `cap`.
pub fn sort_and_cap(triplets: &mut Vec<ScoredTriplet>, cap: usize) {
    triplets.sort_by(|a, b| b.score.total_cmp(&a.score));
    triplets.truncate(cap);
}

/// Turn object-branch outputs over proposals into detections: refine each
/// box with its class deltas, keep scores above the threshold, then per-class
/// NMS. Background never yields a detection.
pub fn postprocess_detections(
    proposals: &[BBox],
    outputs: &ObjectOutputs,
    width: f64,
    height: f64,
    cfg: &InferenceConfig,
) -> Vec<Detection> {
    let mut dets = Vec::new();
    for (i, p) in proposals.iter().enumerate() {
        let probs = outputs.probs(i);
        for (c, &score) in probs[..probs.len() - 1].iter().enumerate() {
            if score <= cfg.score_thresh {
                continue;
            }
            let refined = decode_rel(&outputs.delta(i, c), p)
                .ok()
                .and_then(|b| b.clip(width, height));
            if let Some(bbox) = refined {
                dets.push(Detection {
                    bbox,
                    category: c,
                    score,
                    source: Some(i),
                });
            }
        }
    }
    nms(&dets, cfg.nms_thresh)
}

/// Test-time boxes of a scene: its proposals, or the annotated boxes when
/// it has none.
fn proposals_of(scene: &Scene) -> Vec<BBox> {
    crate::trainer::candidate_boxes(scene)
}

fn feature_rows(
    provider: &dyn FeatureProvider,
    scene: &Scene,
    boxes: impl Iterator<Item = (BBox, Option<usize>)>,
) -> Result<Array2<f64>, FeatureError> {
    let d = provider.dim();
    let mut data = Vec::new();
    let mut n = 0;
    for (b, src) in boxes {
        let f = provider.feature(scene, &b, src)?;
        if f.len() != d {
            return Err(FeatureError::Dimension {
                expected: d,
                got: f.len(),
            });
        }
        data.extend(f);
        n += 1;
    }
    Ok(Array2::from_shape_vec((n, d), data).expect("equal rows"))
}

/// Object detection stage over a scene's proposals.
pub fn detect_objects(
    model: &Model,
    scene: &Scene,
    provider: &dyn FeatureProvider,
    cfg: &InferenceConfig,
) -> Result<Vec<Detection>, InferenceError> {
    let props = proposals_of(scene);
    let x = feature_rows(provider, scene, props.iter().enumerate().map(|(i, b)| (*b, Some(i))))?;
    let out = model.forward_object(&x)?;
    Ok(postprocess_detections(&props, &out, scene.width, scene.height, cfg))
}

/// Overlay data for one image: boxes, labels and predicted target boxes,
/// for rendering by external tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlay {
    pub image_id: u64,
    pub detections: Vec<OverlayDetection>,
    pub triplets: Vec<OverlayTriplet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayDetection {
    pub bbox: BBox,
    pub category: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayTriplet {
    pub human_box: BBox,
    pub label: String,
    pub score: f64,
    pub object_box: Option<BBox>,
    /// Box at the predicted target location.
    pub predicted_target: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneResult {
    pub image_id: u64,
    pub detections: Vec<Detection>,
    pub output: CascadeOutput,
}

impl SceneResult {
    pub fn overlay(&self, dataset_categories: &[String], registry: &ActionRegistry) -> Overlay {
        let detections = self
            .detections
            .iter()
            .map(|d| OverlayDetection {
                bbox: d.bbox,
                category: dataset_categories
                    .get(d.category)
                    .cloned()
                    .unwrap_or_else(|| d.category.to_string()),
                score: d.score,
            })
            .collect();
        let triplets = self
            .output
            .triplets
            .iter()
            .map(|t| {
                let entry = registry.entry_index(&t.action, t.role);
                OverlayTriplet {
                    human_box: t.human_box,
                    label: entry.map_or_else(|| t.action.clone(), |e| registry.entry_label(e)),
                    score: t.score,
                    object_box: t.object_box,
                    predicted_target: self
                        .output
                        .target_boxes
                        .iter()
                        .find(|(h, e, _)| *h == t.human_index && Some(*e) == entry)
                        .map(|(_, _, b)| *b),
                }
            })
            .collect();
        Overlay {
            image_id: self.image_id,
            detections,
            triplets,
        }
    }
}

/// Full pipeline on one scene.
pub fn infer_scene(
    model: &Model,
    registry: &ActionRegistry,
    scene: &Scene,
    provider: &dyn FeatureProvider,
    cfg: &InferenceConfig,
    scorer: TargetScorer<'_>,
) -> Result<SceneResult, InferenceError> {
    let detections = detect_objects(model, scene, provider, cfg)?;
    let x = feature_rows(provider, scene, detections.iter().map(|d| (d.bbox, d.source)))?;
    let output = cascade(model, registry, scene.image_id, &detections, &x, cfg, scorer)?;
    Ok(SceneResult {
        image_id: scene.image_id,
        detections,
        output,
    })
}

/// Pipeline over every scene, in parallel; results keep scene order.
pub fn infer_dataset(
    model: &Model,
    dataset: &Dataset,
    provider: &dyn FeatureProvider,
    cfg: &InferenceConfig,
    scorer: TargetScorer<'_>,
) -> Result<Vec<SceneResult>, InferenceError> {
    dataset
        .scenes
        .par_iter()
        .map(|s| infer_scene(model, &dataset.registry, s, provider, cfg, scorer))
        .collect()
}

/// Cluster centers of the training offsets of every slot, for the
/// appearance-blind baseline. Slots without data get no centers.
pub fn fit_kmeans_offsets(dataset: &Dataset, k: usize, seed: u64) -> Vec<Vec<RelOffset>> {
    slot_offsets(dataset)
        .iter()
        .enumerate()
        .map(|(slot, pts)| {
            if pts.is_empty() {
                Vec::new()
            } else {
                kmeans(pts, k, seed::derive(seed, &[0xB45E, slot as u64]), 300).centers
            }
        })
        .collect()
}


/// One JSON object per line.
pub fn write_predictions<W: Write>(mut w: W, triplets: &[ScoredTriplet]) -> std::io::Result<()> {
    for t in triplets {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}
