use rand::Rng;

use super::config::{HeadConfig, PairwiseMode};
use super::layers::{Linear, Trunk};

/// Output layers start this much smaller than trunk layers.
pub const OUTPUT_INIT_SCALE: f64 = 0.01;

/// Every trainable tensor of the head network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub obj_trunk: Trunk,
    /// Class logits, background last.
    pub obj_cls: Linear,
    /// Per-class box deltas, 4 per non-background class.
    pub obj_reg: Linear,
    pub hum_trunk: Trunk,
    pub hum_act: Linear,
    pub hum_mu: Linear,
    pub hum_wlogit: Option<Linear>,
    pub hum_sigma: Option<Linear>,
    /// Object-side trunk and action head of the interaction branch.
    pub int_trunk: Option<Trunk>,
    pub int_act: Option<Linear>,
    pub pair_fc1: Option<Linear>,
    pub pair_fc2: Option<Linear>,
}

/// Describes which optional tensors exist for a config.
struct Layout {
    wlogit: bool,
    sigma: bool,
    int_trunk: bool,
    int_act: bool,
    pair: bool,
}

fn layout(cfg: &HeadConfig) -> Layout {
    let int = cfg.use_interaction_branch;
    let own_side = int && !cfg.share_interaction_heads;
    Layout {
        wlogit: cfg.density.has_weight_head(),
        sigma: cfg.density.has_sigma_head(),
        int_trunk: own_side,
        int_act: own_side && cfg.pairwise_mode == PairwiseMode::LogitSum,
        pair: int && cfg.pairwise_mode == PairwiseMode::ConcatMlp,
    }
}

impl ModelParams {
    /// Trunks uniform in `±1/sqrt(fan_in)`, output layers a hundredth of
    /// that, biases zero.
    pub fn init<R: Rng>(cfg: &HeadConfig, rng: &mut R) -> Self {
        Self::build(cfg, &mut |i, o, out| {
            let scale = if out { OUTPUT_INIT_SCALE } else { 1.0 };
            Linear::init(i, o, scale, rng)
        })
    }

    pub fn zeros(cfg: &HeadConfig) -> Self {
        Self::build(cfg, &mut |i, o, _| Linear::zeros(i, o))
    }

    /// Zero tensors shaped like `self`.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, _, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn build(cfg: &HeadConfig, make: &mut dyn FnMut(usize, usize, bool) -> Linear) -> Self {
        let l = layout(cfg);
        let (d, h) = (cfg.feature_dim, cfg.hidden_dim);
        let c = cfg.num_object_classes;
        let slots_m = cfg.num_target_slots * cfg.density.components;
        let trunk = |make: &mut dyn FnMut(usize, usize, bool) -> Linear| Trunk {
            fc1: make(d, h, false),
            fc2: make(h, h, false),
        };
        let obj_trunk = trunk(make);
        let obj_cls = make(h, c + 1, true);
        let obj_reg = make(h, 4 * c, true);
        let hum_trunk = trunk(make);
        let hum_act = make(h, cfg.num_actions, true);
        let hum_mu = make(h, cfg.mu_dim(), true);
        let hum_wlogit = l.wlogit.then(|| make(h, slots_m, true));
        let hum_sigma = l.sigma.then(|| make(h, 4 * slots_m, true));
        let int_trunk = l.int_trunk.then(|| trunk(make));
        let int_act = l.int_act.then(|| make(h, cfg.num_actions, true));
        let (pair_fc1, pair_fc2) = if l.pair {
            (
                Some(make(2 * h, cfg.concat_hidden, false)),
                Some(make(cfg.concat_hidden, cfg.num_actions, true)),
            )
        } else {
            (None, None)
        };
        Self {
            obj_trunk,
            obj_cls,
            obj_reg,
            hum_trunk,
            hum_act,
            hum_mu,
            hum_wlogit,
            hum_sigma,
            int_trunk,
            int_act,
            pair_fc1,
            pair_fc2,
        }
    }

    pub fn layers(&self) -> Vec<(&'static str, &Linear)> {
        let mut v = vec![
            ("obj.fc1", &self.obj_trunk.fc1),
            ("obj.fc2", &self.obj_trunk.fc2),
            ("obj.cls", &self.obj_cls),
            ("obj.reg", &self.obj_reg),
            ("hum.fc1", &self.hum_trunk.fc1),
            ("hum.fc2", &self.hum_trunk.fc2),
            ("hum.act", &self.hum_act),
            ("hum.mu", &self.hum_mu),
        ];
        if let Some(l) = &self.hum_wlogit {
            v.push(("hum.wlogit", l));
        }
        if let Some(l) = &self.hum_sigma {
            v.push(("hum.sigma", l));
        }
        if let Some(t) = &self.int_trunk {
            v.push(("int.fc1", &t.fc1));
            v.push(("int.fc2", &t.fc2));
        }
        if let Some(l) = &self.int_act {
            v.push(("int.act", l));
        }
        if let Some(l) = &self.pair_fc1 {
            v.push(("pair.fc1", l));
        }
        if let Some(l) = &self.pair_fc2 {
            v.push(("pair.fc2", l));
        }
        v
    }

    pub fn layers_mut(&mut self) -> Vec<(&'static str, &mut Linear)> {
        let mut v = vec![
            ("obj.fc1", &mut self.obj_trunk.fc1),
            ("obj.fc2", &mut self.obj_trunk.fc2),
            ("obj.cls", &mut self.obj_cls),
            ("obj.reg", &mut self.obj_reg),
            ("hum.fc1", &mut self.hum_trunk.fc1),
            ("hum.fc2", &mut self.hum_trunk.fc2),
            ("hum.act", &mut self.hum_act),
            ("hum.mu", &mut self.hum_mu),
        ];
        if let Some(l) = &mut self.hum_wlogit {
            v.push(("hum.wlogit", l));
        }
        if let Some(l) = &mut self.hum_sigma {
            v.push(("hum.sigma", l));
        }
        if let Some(t) = &mut self.int_trunk {
            v.push(("int.fc1", &mut t.fc1));
            v.push(("int.fc2", &mut t.fc2));
        }
        if let Some(l) = &mut self.int_act {
            v.push(("int.act", l));
        }
        if let Some(l) = &mut self.pair_fc1 {
            v.push(("pair.fc1", l));
        }
        if let Some(l) = &mut self.pair_fc2 {
            v.push(("pair.fc2", l));
        }
        v
    }

    /// `(name, shape, values)` for every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (name, l) in self.layers() {
            out.push((
                format!("{name}.w"),
                l.w.shape().to_vec(),
                l.w.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("{name}.b"),
                l.b.shape().to_vec(),
                l.b.as_slice().expect("standard layout"),
            ));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [f64])> {
        let mut out = Vec::new();
        for (name, l) in self.layers_mut() {
            let ws = l.w.shape().to_vec();
            let bs = l.b.shape().to_vec();
            out.push((
                format!("{name}.w"),
                ws,
                l.w.as_slice_mut().expect("standard layout"),
            ));
            out.push((
                format!("{name}.b"),
                bs,
                l.b.as_slice_mut().expect("standard layout"),
            ));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`; shapes must match.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        let src = other.tensors();
        for ((_, _, dst), (_, _, s)) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d += scale * v;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, _, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn same_shapes(&self, other: &ModelParams) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|(x, y)| x.0 == y.0 && x.1 == y.1)
    }
}

/// SGD with momentum and L2 weight decay:
/// `v <- momentum * v + grad + weight_decay * p`, then `p <- p - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: ModelParams,
}

impl Sgd {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;

    pub fn new(params: &ModelParams, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.zeros_like(),
        }
    }

    pub fn velocity(&self) -> &ModelParams {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        let (m, wd) = (self.momentum, self.weight_decay);
        let g = grads.tensors();
        for (((_, _, p), (_, _, v)), (_, _, g)) in params
            .tensors_mut()
            .into_iter()
            .zip(self.velocity.tensors_mut())
            .zip(g)
        {
            for i in 0..p.len() {
                v[i] = m * v[i] + g[i] + wd * p[i];
                p[i] -= lr * v[i];
            }
        }
    }
}
