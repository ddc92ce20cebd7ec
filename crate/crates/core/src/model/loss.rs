use ndarray::{concatenate, s, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::{relu, relu_backward, Linear, Trunk};
use super::{row, DensityKind, Model, ModelParams, PairwiseMode};
use crate::density::{mdn_nll, sigmoid, smooth_l1_with_grad, softmax, softplus, MdnOutputs};
use crate::error::ModelError;
use crate::geometry::RelOffset;

/// Boxes sampled for the object branch of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSamples {
    pub features: Array2<f64>,
    /// Category index, or `num_object_classes` for background.
    pub labels: Vec<usize>,
    /// Box-delta target for foreground samples.
    pub reg_targets: Vec<Option<RelOffset>>,
}

/// Person boxes sampled for the human-centric branch of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct HumanSamples {
    pub features: Array2<f64>,
    /// `N × A` multi-hot verb labels.
    pub actions: Array2<f64>,
    /// Per box, per target slot: target offset relative to the box, where annotated.
    pub targets: Vec<Vec<Option<RelOffset>>>,
}

/// Ground-truth (human, target) feature pairs with their verb labels.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionSamples {
    pub human: Array2<f64>,
    pub object: Array2<f64>,
    pub labels: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSamples {
    pub object: ObjectSamples,
    pub human: HumanSamples,
    pub interaction: InteractionSamples,
}

impl ImageSamples {
    pub fn empty(feature_dim: usize, num_actions: usize) -> Self {
        Self {
            object: ObjectSamples {
                features: Array2::zeros((0, feature_dim)),
                labels: Vec::new(),
                reg_targets: Vec::new(),
            },
            human: HumanSamples {
                features: Array2::zeros((0, feature_dim)),
                actions: Array2::zeros((0, num_actions)),
                targets: Vec::new(),
            },
            interaction: InteractionSamples {
                human: Array2::zeros((0, feature_dim)),
                object: Array2::zeros((0, feature_dim)),
                labels: Array2::zeros((0, num_actions)),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub object_cls: f64,
    pub object_reg: f64,
    pub action_cls: f64,
    pub target_loc: f64,
    pub interaction_cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            object_cls: 1.0,
            object_reg: 1.0,
            action_cls: 2.0,
            target_loc: 1.0,
            interaction_cls: 1.0,
        }
    }
}

/// Unweighted loss terms and their weighted sum.
///
/// `target_loc` is a negative log-likelihood on the mixture path and can go
/// below zero once densities exceed one.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub object_cls: f64,
    pub object_reg: f64,
    pub action_cls: f64,
    pub target_loc: f64,
    pub interaction_cls: f64,
    pub total: f64,
}

impl LossReport {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.object_cls * self.object_cls
            + w.object_reg * self.object_reg
            + w.action_cls * self.action_cls
            + w.target_loc * self.target_loc
            + w.interaction_cls * self.interaction_cls
    }

    fn accumulate(&mut self, o: &LossReport) {
        self.object_cls += o.object_cls;
        self.object_reg += o.object_reg;
        self.action_cls += o.action_cls;
        self.target_loc += o.target_loc;
        self.interaction_cls += o.interaction_cls;
        self.total += o.total;
    }

    fn scale(&mut self, s: f64) {
        self.object_cls *= s;
        self.object_reg *= s;
        self.action_cls *= s;
        self.target_loc *= s;
        self.interaction_cls *= s;
        self.total *= s;
    }
}

/// Binary cross-entropy of a probability, clamped 1e-7 away from 0 and 1.
pub fn bce_loss(p: f64, label: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

fn finite(v: f64, term: &'static str) -> Result<f64, ModelError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ModelError::NonFinite { term })
    }
}

fn check_dim(x: &Array2<f64>, d: usize) -> Result<(), ModelError> {
    if x.nrows() > 0 && x.ncols() != d {
        return Err(ModelError::Dimension {
            expected: d,
            got: x.ncols(),
        });
    }
    Ok(())
}

/// Binary cross-entropy from logits, averaged over all entries; returns the
/// mean loss and `scale * dL/dlogits`.
fn bce_logits(logits: &Array2<f64>, labels: &Array2<f64>, scale: f64) -> (f64, Array2<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut d = Array2::zeros(logits.raw_dim());
    ndarray::Zip::from(&mut d)
        .and(logits)
        .and(labels)
        .for_each(|d, &l, &y| {
            loss += softplus(l) - y * l;
            *d = scale * (sigmoid(l) - y) / n;
        });
    (loss / n, d)
}

fn object_branch(model: &Model, w: &super::LossWeights, s: &ObjectSamples, g: &mut ModelParams, rep: &mut LossReport) -> Result<(), ModelError> {
    let n = s.features.nrows();
    if n == 0 {
        return Ok(());
    }
    let p = &model.params;
    let c = model.config.num_object_classes;
    let t = p.obj_trunk.forward(&s.features);
    let logits = p.obj_cls.forward(&t.h2);
    let deltas = p.obj_reg.forward(&t.h2);

    let mut dlog = Array2::zeros(logits.raw_dim());
    let mut ce = 0.0;
    for i in 0..n {
        let l = row(&logits, i);
        let y = s.labels[i];
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        ce += lse - l[y];
        for (k, pk) in softmax(l).into_iter().enumerate() {
            let onehot = if k == y { 1.0 } else { 0.0 };
            dlog[[i, k]] = w.object_cls * (pk - onehot) / n as f64;
        }
    }
    rep.object_cls = finite(ce / n as f64, "object_cls")?;

    let positives: Vec<usize> = (0..n)
        .filter(|&i| s.labels[i] < c && s.reg_targets[i].is_some())
        .collect();
    let mut ddel = Array2::zeros(deltas.raw_dim());
    let mut reg = 0.0;
    for &i in &positives {
        let k = s.labels[i];
        let target = s.reg_targets[i].expect("positive").to_array();
        let (l, gr) = smooth_l1_with_grad(&row(&deltas, i)[4 * k..4 * k + 4], &target);
        reg += l;
        for j in 0..4 {
            ddel[[i, 4 * k + j]] = w.object_reg * gr[j] / positives.len() as f64;
        }
    }
    if !positives.is_empty() {
        rep.object_reg = finite(reg / positives.len() as f64, "object_reg")?;
    }

    let mut dh2 = p.obj_cls.backward(&t.h2, &dlog, &mut g.obj_cls, true).expect("dx");
    dh2 += &p.obj_reg.backward(&t.h2, &ddel, &mut g.obj_reg, true).expect("dx");
    p.obj_trunk.backward(&s.features, &t, dh2, &mut g.obj_trunk);
    Ok(())
}

fn human_branch(model: &Model, w: &LossWeights, s: &HumanSamples, g: &mut ModelParams, rep: &mut LossReport) -> Result<(), ModelError> {
    let n = s.features.nrows();
    if n == 0 {
        return Ok(());
    }
    let cfg = &model.config;
    let p = &model.params;
    let t = p.hum_trunk.forward(&s.features);
    let logits = p.hum_act.forward(&t.h2);
    let (act_loss, dlog) = bce_logits(&logits, &s.actions, w.action_cls);
    rep.action_cls = finite(act_loss, "action_cls")?;

    let mu = p.hum_mu.forward(&t.h2);
    let wl = p.hum_wlogit.as_ref().map(|l| l.forward(&t.h2));
    let rs = p.hum_sigma.as_ref().map(|l| l.forward(&t.h2));
    let mut dmu = Array2::zeros(mu.raw_dim());
    let mut dwl = wl.as_ref().map(|a| Array2::zeros(a.raw_dim()));
    let mut drs = rs.as_ref().map(|a| Array2::zeros(a.raw_dim()));
    let defined: usize = s.targets.iter().flatten().filter(|t| t.is_some()).count();
    let m = cfg.density.components;
    let mut loc = 0.0;
    for (i, row_targets) in s.targets.iter().enumerate() {
        for (slot, target) in row_targets.iter().enumerate() {
            let Some(target) = target else { continue };
            let scale = w.target_loc / defined as f64;
            let span = 4 * m * slot..4 * m * (slot + 1);
            match cfg.density.kind {
                DensityKind::FixedSigma => {
                    let (l, gr) = smooth_l1_with_grad(&row(&mu, i)[span.clone()], &target.to_array());
                    loc += l;
                    for (j, gj) in span.zip(gr) {
                        dmu[[i, j]] = scale * gj;
                    }
                }
                DensityKind::Mixture => {
                    let unit = [0.0];
                    let out = MdnOutputs {
                        weight_logits: match &wl {
                            Some(a) => &row(a, i)[slot * m..(slot + 1) * m],
                            None => &unit,
                        },
                        means: &row(&mu, i)[span.clone()],
                        raw_sigmas: rs.as_ref().map(|a| &row(a, i)[span.clone()]),
                        sigma_floor: cfg.density.sigma_floor,
                        fixed_sigma: cfg.density.sigma,
                    };
                    let r = mdn_nll(target, &out);
                    loc += r.nll;
                    for (j, gj) in span.clone().zip(&r.d_means) {
                        dmu[[i, j]] = scale * gj;
                    }
                    if let Some(d) = dwl.as_mut() {
                        for (k, gk) in r.d_weight_logits.iter().enumerate() {
                            d[[i, slot * m + k]] = scale * gk;
                        }
                    }
                    if let (Some(d), Some(gr)) = (drs.as_mut(), r.d_raw_sigmas.as_ref()) {
                        for (j, gj) in span.clone().zip(gr) {
                            d[[i, j]] = scale * gj;
                        }
                    }
                }
            }
        }
    }
    if defined > 0 {
        rep.target_loc = finite(loc / defined as f64, "target_loc")?;
    }

    let mut dh2 = p.hum_act.backward(&t.h2, &dlog, &mut g.hum_act, true).expect("dx");
    dh2 += &p.hum_mu.backward(&t.h2, &dmu, &mut g.hum_mu, true).expect("dx");
    if let (Some(l), Some(gl), Some(d)) = (&p.hum_wlogit, g.hum_wlogit.as_mut(), &dwl) {
        dh2 += &l.backward(&t.h2, d, gl, true).expect("dx");
    }
    if let (Some(l), Some(gl), Some(d)) = (&p.hum_sigma, g.hum_sigma.as_mut(), &drs) {
        dh2 += &l.backward(&t.h2, d, gl, true).expect("dx");
    }
    p.hum_trunk.backward(&s.features, &t, dh2, &mut g.hum_trunk);
    Ok(())
}

fn interaction_branch(model: &Model, w: &LossWeights, s: &InteractionSamples, g: &mut ModelParams, rep: &mut LossReport) -> Result<(), ModelError> {
    let n = s.human.nrows();
    if n == 0 || !model.config.use_interaction_branch {
        return Ok(());
    }
    let p = &model.params;
    let th = p.hum_trunk.forward(&s.human);
    let side_trunk: &Trunk = p.int_trunk.as_ref().unwrap_or(&p.hum_trunk);
    let to = side_trunk.forward(&s.object);

    let (dh_h, dh_o) = match model.config.pairwise_mode {
        PairwiseMode::LogitSum => {
            let side_act: &Linear = p.int_act.as_ref().unwrap_or(&p.hum_act);
            let logits = p.hum_act.forward(&th.h2) + side_act.forward(&to.h2);
            let (loss, dl) = bce_logits(&logits, &s.labels, w.interaction_cls);
            rep.interaction_cls = finite(loss, "interaction_cls")?;
            let dh = p.hum_act.backward(&th.h2, &dl, &mut g.hum_act, true).expect("dx");
            let ga = g.int_act.as_mut().unwrap_or(&mut g.hum_act);
            let dob = side_act.backward(&to.h2, &dl, ga, true).expect("dx");
            (dh, dob)
        }
        PairwiseMode::ConcatMlp => {
            let fc1 = p.pair_fc1.as_ref().expect("pair head");
            let fc2 = p.pair_fc2.as_ref().expect("pair head");
            let z = concatenate(Axis(1), &[th.h2.view(), to.h2.view()]).expect("same rows");
            let a = relu(fc1.forward(&z));
            let logits = fc2.forward(&a);
            let (loss, dl) = bce_logits(&logits, &s.labels, w.interaction_cls);
            rep.interaction_cls = finite(loss, "interaction_cls")?;
            let da = fc2
                .backward(&a, &dl, g.pair_fc2.as_mut().expect("pair head"), true)
                .expect("dx");
            let da = relu_backward(da, &a);
            let dz = fc1
                .backward(&z, &da, g.pair_fc1.as_mut().expect("pair head"), true)
                .expect("dx");
            let h = th.h2.ncols();
            (dz.slice(s![.., ..h]).to_owned(), dz.slice(s![.., h..]).to_owned())
        }
    };
    p.hum_trunk.backward(&s.human, &th, dh_h, &mut g.hum_trunk);
    let gt = g.int_trunk.as_mut().unwrap_or(&mut g.hum_trunk);
    side_trunk.backward(&s.object, &to, dh_o, gt);
    Ok(())
}

/// Loss of one image and the gradient of its weighted total.
pub fn image_loss_and_grad(model: &Model, weights: &LossWeights, samples: &ImageSamples) -> Result<(LossReport, ModelParams), ModelError> {
    let d = model.config.feature_dim;
    check_dim(&samples.object.features, d)?;
    check_dim(&samples.human.features, d)?;
    check_dim(&samples.interaction.human, d)?;
    check_dim(&samples.interaction.object, d)?;
    let mut g = model.params.zeros_like();
    let mut rep = LossReport::default();
    object_branch(model, weights, &samples.object, &mut g, &mut rep)?;
    human_branch(model, weights, &samples.human, &mut g, &mut rep)?;
    interaction_branch(model, weights, &samples.interaction, &mut g, &mut rep)?;
    rep.total = finite(rep.weighted_total(weights), "total")?;
    Ok((rep, g))
}

/// Mean loss and gradient over images. Images are processed in parallel and
/// reduced in index order, so the result does not depend on thread count.
pub fn batch_loss_and_grad(model: &Model, weights: &LossWeights, batch: &[ImageSamples]) -> Result<(LossReport, ModelParams), ModelError> {
    let per_image: Vec<Result<(LossReport, ModelParams), ModelError>> = batch
        .par_iter()
        .map(|s| image_loss_and_grad(model, weights, s))
        .collect();
    let mut rep = LossReport::default();
    let mut grad = model.params.zeros_like();
    for r in per_image {
        let (r, g) = r?;
        rep.accumulate(&r);
        grad.add_scaled(&g, 1.0);
    }
    if !batch.is_empty() {
        let inv = 1.0 / batch.len() as f64;
        rep.scale(inv);
        grad.scale(inv);
    }
    Ok((rep, grad))
}
