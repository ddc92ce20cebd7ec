//! Label assignment, per-image sampling and the SGD training loop.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Scene, Target};
use crate::density::kmeans;
use crate::error::{FeatureError, TrainError};
use crate::features::FeatureProvider;
use crate::geometry::{encode_rel, iou, BBox, RelOffset};
use crate::model::{
    batch_loss_and_grad, DensityKind, HeadConfig, HumanSamples, ImageSamples, InteractionSamples, LossReport,
    LossWeights, Model, ObjectSamples, Sgd,
};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub iterations: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub phases: Vec<Phase>,
    /// Images whose gradients are averaged into one step.
    pub images_per_step: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            phases: vec![
                Phase {
                    iterations: 10_000,
                    lr: 0.001,
                },
                Phase {
                    iterations: 3_000,
                    lr: 0.0001,
                },
            ],
            images_per_step: 16,
        }
    }
}

impl Schedule {
    pub fn total_iterations(&self) -> usize {
        self.phases.iter().map(|p| p.iterations).sum()
    }

    /// Learning rate of 0-based iteration `it`.
    pub fn lr_at(&self, it: usize) -> f64 {
        let mut end = 0;
        for p in &self.phases {
            end += p.iterations;
            if it < end {
                return p.lr;
            }
        }
        self.phases.last().map_or(0.0, |p| p.lr)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.phases.is_empty() || self.phases.iter().any(|p| p.iterations == 0) {
            return Err(TrainError::Config("schedule phases must be non-empty".into()));
        }
        if self.phases.iter().any(|p| !(p.lr >= 0.0 && p.lr.is_finite())) {
            return Err(TrainError::Config("learning rates must be finite and non-negative".into()));
        }
        if self.images_per_step == 0 {
            return Err(TrainError::Config("images_per_step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub max_object_samples: usize,
    /// Positives asked for per image, as a fraction of `max_object_samples`.
    pub positive_fraction: f64,
    pub max_human_samples: usize,
    /// IoU at or above which a box counts as covering an instance.
    pub fg_iou: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            max_object_samples: 64,
            positive_fraction: 0.25,
            max_human_samples: 16,
            fg_iou: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub sampling: SamplingConfig,
    pub loss_weights: LossWeights,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Initialize mixture means at k-means centers of the training offsets.
    pub init_mixture_from_data: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            sampling: SamplingConfig::default(),
            loss_weights: LossWeights::default(),
            momentum: Sgd::DEFAULT_MOMENTUM,
            weight_decay: Sgd::DEFAULT_WEIGHT_DECAY,
            init_mixture_from_data: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectAssignment {
    pub proposal: usize,
    /// Category, or the background index.
    pub label: usize,
    pub reg_target: Option<RelOffset>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HumanAssignment {
    pub proposal: usize,
    pub person: usize,
    pub actions: Vec<f64>,
    pub targets: Vec<Option<RelOffset>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairAssignment {
    pub human_proposal: usize,
    pub object_proposal: usize,
    pub person: usize,
    pub target: Target,
    pub labels: Vec<f64>,
}

/// Box-level training targets of one image, before feature lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelAssignment {
    pub objects: Vec<ObjectAssignment>,
    pub humans: Vec<HumanAssignment>,
    pub pairs: Vec<PairAssignment>,
}

/// Candidate boxes for training: the scene proposals, or the ground-truth
/// boxes when a scene carries none.
pub fn candidate_boxes(scene: &Scene) -> Vec<BBox> {
    if scene.proposals.is_empty() {
        scene.instances().iter().map(|i| i.bbox).collect()
    } else {
        scene.proposals.clone()
    }
}

fn best_match(b: &BBox, boxes: impl Iterator<Item = BBox>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, g) in boxes.enumerate() {
        let o = iou(b, &g);
        if best.is_none_or(|(_, bo)| o > bo) {
            best = Some((i, o));
        }
    }
    best
}

/// Sample up to `positives_wanted` positives and three negatives per positive
/// taken, within `cap` in total.
pub fn sample_with_ratio(
    positives: &mut [usize],
    negatives: &mut [usize],
    cap: usize,
    positives_wanted: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    positives.shuffle(rng);
    negatives.shuffle(rng);
    let np = positives.len().min(positives_wanted).min(cap);
    let nn = negatives.len().min(3 * np).min(cap - np);
    (positives[..np].to_vec(), negatives[..nn].to_vec())
}

/// Match proposals to ground truth and draw this image's samples.
pub fn assign_labels(
    scene: &Scene,
    dataset: &Dataset,
    sampling: &SamplingConfig,
    rng: &mut ChaCha8Rng,
) -> LabelAssignment {
    let registry = &dataset.registry;
    let num_classes = dataset.categories.len();
    let boxes = candidate_boxes(scene);
    let instances = scene.instances();

    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut obj_label = vec![(num_classes, None); boxes.len()];
    for (pi, b) in boxes.iter().enumerate() {
        match best_match(b, instances.iter().map(|i| i.bbox)) {
            Some((k, o)) if o >= sampling.fg_iou => {
                let inst = &instances[k];
                if inst.ignore {
                    continue;
                }
                obj_label[pi] = (inst.category, Some(encode_rel(&inst.bbox, b)));
                pos.push(pi);
            }
            _ => neg.push(pi),
        }
    }
    let wanted = (sampling.positive_fraction * sampling.max_object_samples as f64).round() as usize;
    let (p, n) = sample_with_ratio(&mut pos, &mut neg, sampling.max_object_samples, wanted, rng);
    let objects = p
        .into_iter()
        .chain(n)
        .map(|pi| ObjectAssignment {
            proposal: pi,
            label: obj_label[pi].0,
            reg_target: obj_label[pi].1,
        })
        .collect();

    let mut person_boxes: Vec<(usize, usize)> = boxes
        .iter()
        .enumerate()
        .filter_map(|(pi, b)| match best_match(b, scene.persons.iter().copied()) {
            Some((k, o)) if o >= sampling.fg_iou => Some((pi, k)),
            _ => None,
        })
        .collect();
    person_boxes.shuffle(rng);
    person_boxes.truncate(sampling.max_human_samples);

    let mut humans = Vec::with_capacity(person_boxes.len());
    let mut pairs = Vec::new();
    for &(pi, person) in &person_boxes {
        let hb = boxes[pi];
        let mut actions = vec![0.0; registry.num_verbs()];
        let mut targets = vec![None; registry.num_slots()];
        let mut person_targets: Vec<(Target, Vec<f64>)> = Vec::new();
        for r in scene.interactions.iter().filter(|r| r.person == person) {
            let spec = registry.entry(r.entry);
            actions[spec.verb] = 1.0;
            let (Some(slot), Some(t)) = (spec.slot, r.target) else { continue };
            if targets[slot].is_none() {
                targets[slot] = Some(encode_rel(&scene.target_box(t), &hb));
            }
            match person_targets.iter_mut().find(|(pt, _)| *pt == t) {
                Some((_, l)) => l[spec.verb] = 1.0,
                None => {
                    let mut l = vec![0.0; registry.num_verbs()];
                    l[spec.verb] = 1.0;
                    person_targets.push((t, l));
                }
            }
        }
        for (t, labels) in person_targets {
            let tb = scene.target_box(t);
            if let Some((oi, o)) = best_match(&tb, boxes.iter().copied()) {
                if o >= sampling.fg_iou {
                    pairs.push(PairAssignment {
                        human_proposal: pi,
                        object_proposal: oi,
                        person,
                        target: t,
                        labels,
                    });
                }
            }
        }
        humans.push(HumanAssignment {
            proposal: pi,
            person,
            actions,
            targets,
        });
    }
    LabelAssignment {
        objects,
        humans,
        pairs,
    }
}

fn stack(
    provider: &dyn FeatureProvider,
    scene: &Scene,
    boxes: &[BBox],
    idx: impl Iterator<Item = usize>,
) -> Result<Array2<f64>, FeatureError> {
    let d = provider.dim();
    let mut data = Vec::new();
    let mut n = 0;
    for i in idx {
        let f = provider.feature(scene, &boxes[i], Some(i))?;
        if f.len() != d {
            return Err(FeatureError::Dimension {
                expected: d,
                got: f.len(),
            });
        }
        data.extend(f);
        n += 1;
    }
    Ok(Array2::from_shape_vec((n, d), data).expect("rows of equal length"))
}

fn rows(v: impl Iterator<Item = Vec<f64>>, cols: usize) -> Array2<f64> {
    let data: Vec<f64> = v.flatten().collect();
    Array2::from_shape_vec((data.len() / cols.max(1), cols), data).expect("rows of equal length")
}

/// Look up features for an assignment.
pub fn build_samples(
    assignment: &LabelAssignment,
    scene: &Scene,
    provider: &dyn FeatureProvider,
    num_actions: usize,
) -> Result<ImageSamples, FeatureError> {
    let boxes = candidate_boxes(scene);
    let a = assignment;
    Ok(ImageSamples {
        object: ObjectSamples {
            features: stack(provider, scene, &boxes, a.objects.iter().map(|o| o.proposal))?,
            labels: a.objects.iter().map(|o| o.label).collect(),
            reg_targets: a.objects.iter().map(|o| o.reg_target).collect(),
        },
        human: HumanSamples {
            features: stack(provider, scene, &boxes, a.humans.iter().map(|h| h.proposal))?,
            actions: rows(a.humans.iter().map(|h| h.actions.clone()), num_actions),
            targets: a.humans.iter().map(|h| h.targets.clone()).collect(),
        },
        interaction: InteractionSamples {
            human: stack(provider, scene, &boxes, a.pairs.iter().map(|p| p.human_proposal))?,
            object: stack(provider, scene, &boxes, a.pairs.iter().map(|p| p.object_proposal))?,
            labels: rows(a.pairs.iter().map(|p| p.labels.clone()), num_actions),
        },
    })
}

/// Head config matching a dataset and a feature provider.
pub fn head_config_for(dataset: &Dataset, feature_dim: usize, template: &HeadConfig) -> HeadConfig {
    HeadConfig {
        feature_dim,
        num_actions: dataset.registry.num_verbs(),
        num_target_slots: dataset.registry.num_slots(),
        num_object_classes: dataset.categories.len(),
        ..template.clone()
    }
}

/// Ground-truth target offsets of every density slot, relative to the
/// annotated person box.
pub fn slot_offsets(dataset: &Dataset) -> Vec<Vec<RelOffset>> {
    let mut out = vec![Vec::new(); dataset.registry.num_slots()];
    for s in &dataset.scenes {
        for r in &s.interactions {
            let (Some(slot), Some(t)) = (dataset.registry.entry(r.entry).slot, r.target) else { continue };
            out[slot].push(encode_rel(&s.target_box(t), &s.persons[r.person]));
        }
    }
    out
}

/// Start learned widths just above the floor. Wide initial components
/// overlap, share responsibility and drift into one.
pub fn narrow_mixture_widths(model: &mut Model) {
    if let Some(l) = model.params.hum_sigma.as_mut() {
        l.b.fill(-4.0);
    }
}

/// Set each slot's mixture-mean biases to k-means centers of its training
/// offsets so the components start apart, with narrow widths.
pub fn init_mixture_means(model: &mut Model, dataset: &Dataset, seed: u64) {
    let m = model.config.density.components;
    if model.config.density.kind != DensityKind::Mixture || m < 2 {
        return;
    }
    for (slot, pts) in slot_offsets(dataset).iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let fit = kmeans(pts, m, seed::derive(seed, &[0x3EA2, slot as u64]), 100);
        for (c, center) in fit.centers.iter().enumerate() {
            for (k, v) in center.to_array().into_iter().enumerate() {
                model.params.hum_mu.b[4 * m * slot + 4 * c + k] = v;
            }
        }
    }
    narrow_mixture_widths(model);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub lr: f64,
    pub loss: LossReport,
}

pub const LOSS_LOG_HEADER: &str = "iteration lr object_cls object_reg action_cls target_loc interaction_cls total";

pub fn format_loss_log(history: &[LogEntry]) -> String {
    let mut s = String::from(LOSS_LOG_HEADER);
    s.push('\n');
    for e in history {
        let l = &e.loss;
        s.push_str(&format!(
            "{} {} {} {} {} {} {} {}\n",
            e.iteration, e.lr, l.object_cls, l.object_reg, l.action_cls, l.target_loc, l.interaction_cls, l.total
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<LogEntry>,
}

/// Scenes of iteration `it`: consecutive slices of a per-epoch shuffle.
fn batch_indices(n: usize, per_step: usize, it: usize, seed: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(per_step);
    let start = it * per_step;
    let mut order: Option<(usize, Vec<usize>)> = None;
    for k in start..start + per_step {
        let epoch = k / n;
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut o: Vec<usize> = (0..n).collect();
            o.shuffle(&mut seed::rng(seed, &[0xE90C, epoch as u64]));
            order = Some((epoch, o));
        }
        out.push(order.as_ref().expect("set above").1[k % n]);
    }
    out
}

/// Draw the samples of one training step.
pub fn step_samples(
    dataset: &Dataset,
    provider: &dyn FeatureProvider,
    cfg: &TrainConfig,
    num_actions: usize,
    it: usize,
) -> Result<Vec<ImageSamples>, FeatureError> {
    let idx = batch_indices(dataset.scenes.len(), cfg.schedule.images_per_step, it, cfg.seed);
    idx.par_iter()
        .enumerate()
        .map(|(slot, &si)| {
            let scene = &dataset.scenes[si];
            let mut rng = seed::rng(cfg.seed, &[0x5A3F, it as u64, slot as u64]);
            let a = assign_labels(scene, dataset, &cfg.sampling, &mut rng);
            build_samples(&a, scene, provider, num_actions)
        })
        .collect()
}

/// Train from a fresh initialization. `on_step` sees the model after every
/// update (for periodic checkpoints).
pub fn train(
    dataset: &Dataset,
    provider: &dyn FeatureProvider,
    head: &HeadConfig,
    cfg: &TrainConfig,
    on_step: Option<StepHook<'_>>,
) -> Result<TrainOutcome, TrainError> {
    let head = head_config_for(dataset, provider.dim(), head);
    let mut model = Model::new(head, seed::derive(cfg.seed, &[0x1417]))?;
    if cfg.init_mixture_from_data {
        init_mixture_means(&mut model, dataset, cfg.seed);
    }
    train_from(model, dataset, provider, cfg, on_step)
}

/// Called with the iteration count and the model after each update.
pub type StepHook<'a> = &'a mut dyn FnMut(usize, &Model);

/// Continue training an existing model.
pub fn train_from(
    mut model: Model,
    dataset: &Dataset,
    provider: &dyn FeatureProvider,
    cfg: &TrainConfig,
    mut on_step: Option<StepHook<'_>>,
) -> Result<TrainOutcome, TrainError> {
    cfg.schedule.validate()?;
    if dataset.scenes.is_empty() {
        return Err(TrainError::Config("training set has no scenes".into()));
    }
    if provider.dim() != model.config.feature_dim {
        return Err(TrainError::Config(format!(
            "features have {} dims, model expects {}",
            provider.dim(),
            model.config.feature_dim
        )));
    }
    let num_actions = model.config.num_actions;
    let mut sgd = Sgd::new(&model.params, cfg.momentum, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.schedule.total_iterations());
    for it in 0..cfg.schedule.total_iterations() {
        let batch = step_samples(dataset, provider, cfg, num_actions, it)?;
        let (report, grad) = batch_loss_and_grad(&model, &cfg.loss_weights, &batch)
            .map_err(|source| TrainError::Diverged { iteration: it, source })?;
        let lr = cfg.schedule.lr_at(it);
        sgd.step(&mut model.params, &grad, lr);
        if !model.params.is_finite() {
            return Err(TrainError::Diverged {
                iteration: it,
                source: crate::error::ModelError::NonFinite { term: "parameter" },
            });
        }
        history.push(LogEntry {
            iteration: it,
            lr,
            loss: report,
        });
        if it % 500 == 0 {
            log::info!("iteration {it}: total loss {:.5}", report.total);
        }
        if let Some(cb) = on_step.as_mut() {
            cb(it, &model);
        }
    }
    Ok(TrainOutcome { model, history })
}
