//! Synthetic scenes whose target densities are known by construction.
//!
//! Every person carries a 2-d latent pose `z`. For each targeted role entry
//! the offset of the target relative to the person is an affine function of
//! `z`, so the target location is predictable from the person's appearance
//! (features expose `z`) but not from the action alone. Distractors are
//! placed by the same affine maps with fresh poses, which makes them
//! plausible targets for an appearance-blind scorer.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::annotations::{Dataset, Interaction, Latent, Scene, SceneObject, Target};
use super::registry::{ActionRegistry, Role, VerbDef};
use crate::geometry::{decode_rel, encode_rel, iou, BBox, RelOffset};
use crate::seed;

pub const POSE_DIM: usize = 2;

/// Object categories of generated scenes; index 0 is `person`.
pub const SYNTH_CATEGORIES: [&str; 9] = [
    "person", "ball", "cup", "knife", "cake", "phone", "board", "chair", "book",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub scenes: usize,
    pub persons_per_scene: usize,
    pub distractors_per_scene: usize,
    /// Actions per person are drawn uniformly from this inclusive range.
    pub min_actions: usize,
    pub max_actions: usize,
    /// Std-dev of the Gaussian noise added to every target offset.
    pub offset_noise: f64,
    pub image_width: f64,
    pub image_height: f64,
    /// Jittered copies per ground-truth box in the proposal set.
    pub jitter_copies: usize,
    pub jitter_magnitude: f64,
    /// Uniformly placed background proposals.
    pub background_proposals: usize,
    /// Minimum offset-space distance between a target's latent offset and
    /// any other object seen from the same person.
    pub min_separation: f64,
    pub first_image_id: u64,
    pub seed: u64,
    /// Verbs to generate; the V-COCO registry when absent.
    pub actions: Option<Vec<VerbDef>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scenes: 100,
            persons_per_scene: 2,
            distractors_per_scene: 5,
            min_actions: 1,
            max_actions: 3,
            offset_noise: 0.05,
            image_width: 640.0,
            image_height: 480.0,
            jitter_copies: 3,
            jitter_magnitude: 0.1,
            background_proposals: 12,
            min_separation: 0.6,
            first_image_id: 0,
            seed: 0,
            actions: None,
        }
    }
}

/// Affine map from a person's pose to the target offset of one role entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetMap {
    pub base: [f64; 4],
    pub jacobian: [[f64; POSE_DIM]; 4],
}

impl OffsetMap {
    pub fn apply(&self, z: &[f64; POSE_DIM]) -> RelOffset {
        let mut out = self.base;
        for (o, row) in out.iter_mut().zip(&self.jacobian) {
            *o += row[0] * z[0] + row[1] * z[1];
        }
        RelOffset::from(out)
    }

    /// Deterministic map for a role entry, derived from its name and role so
    /// it does not depend on registry order. A few verbs get hand-placed
    /// bases: carried objects sit at hand height, thrown ones in front,
    /// seats below.
    pub fn for_entry(name: &str, role: Role) -> Self {
        let mut rng = seed::rng(seed::hash_str(name), &[role as u64]);
        let (tx, ty) = match name {
            "carry" | "hold" => (0.45, 0.1),
            "throw" => (1.1, -0.2),
            "sit" | "ride" => (0.0, 0.45),
            _ => (rng.random_range(-0.9..0.9), rng.random_range(-0.5..0.5)),
        };
        let tw = rng.random_range(-1.1..-0.1);
        let th = rng.random_range(-1.3..-0.3);
        // rotated and scaled pose: the pose moves the target over a square of
        // side about 1.2 person widths/heights
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let scale = 0.6;
        let (s, c) = angle.sin_cos();
        let jacobian = [
            [scale * c, -scale * s],
            [0.6 * scale * s, 0.6 * scale * c],
            [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)],
            [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)],
        ];
        Self {
            base: [tx, ty, tw, th],
            jacobian,
        }
    }
}

/// Preferred category of an entry's targets (never `person`).
pub fn preferred_category(name: &str, role: Role) -> usize {
    1 + (seed::derive(seed::hash_str(name), &[role as u64, 77]) % (SYNTH_CATEGORIES.len() as u64 - 1))
        as usize
}

fn target_category(rng: &mut ChaCha8Rng, name: &str, role: Role) -> usize {
    if rng.random::<f64>() < 0.7 {
        preferred_category(name, role)
    } else {
        rng.random_range(1..SYNTH_CATEGORIES.len())
    }
}

/// Ground-truth boxes plus `count` perturbed copies of each, clipped to the
/// image. Copies shift the center by `magnitude` times the box size and scale
/// the size by `exp(magnitude * n)`, with `n` standard normal.
pub fn jitter_proposals(
    boxes: &[BBox],
    width: f64,
    height: f64,
    count: usize,
    magnitude: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<BBox> {
    assert!(magnitude >= 0.0, "jitter magnitude must be non-negative");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out: Vec<BBox> = boxes.to_vec();
    for b in boxes {
        let (cx, cy) = b.center();
        let (w, h) = (b.width(), b.height());
        let mut made = 0;
        let mut attempts = 0;
        while made < count {
            attempts += 1;
            let nx = normal.sample(rng);
            let ny = normal.sample(rng);
            let nw = normal.sample(rng);
            let nh = normal.sample(rng);
            let cand = BBox::from_center(
                cx + magnitude * w * nx,
                cy + magnitude * h * ny,
                w * (magnitude * nw).exp(),
                h * (magnitude * nh).exp(),
            )
            .ok()
            .and_then(|c| c.clip(width, height));
            match cand {
                Some(c) => {
                    out.push(c);
                    made += 1;
                }
                // clipped away entirely; fall back to the source box
                None if attempts > 20 * (count + 1) => {
                    out.push(*b);
                    made += 1;
                }
                None => {}
            }
        }
    }
    out
}

/// Uniformly placed boxes of moderate size, standing in for the background
/// proposals an RPN emits.
pub fn background_proposals(width: f64, height: f64, count: usize, rng: &mut ChaCha8Rng) -> Vec<BBox> {
    (0..count)
        .map(|_| {
            let w = rng.random_range(0.05..0.35) * width;
            let h = rng.random_range(0.05..0.45) * height;
            let x = rng.random_range(0.0..width - w);
            let y = rng.random_range(0.0..height - h);
            BBox::new(x, y, x + w, y + h).expect("positive size")
        })
        .collect()
}

struct Placement {
    persons: Vec<BBox>,
    poses: Vec<[f64; 2]>,
    objects: Vec<SceneObject>,
    interactions: Vec<Interaction>,
    /// (person, latent offset, object index) for every targeted record
    targets: Vec<(usize, RelOffset, usize)>,
}

fn objects_conflict(b: &BBox, objects: &[SceneObject]) -> bool {
    objects.iter().any(|o| iou(b, &o.bbox) > 0.2)
}

/// Is `b` (not the true target) too close to any person's latent target?
fn confusable(b: &BBox, p: &Placement, min_sep: f64, skip: Option<usize>) -> bool {
    p.targets.iter().any(|&(person, latent, obj)| {
        Some(obj) != skip && encode_rel(b, &p.persons[person]).sq_dist(&latent).sqrt() < min_sep
    })
}

fn try_place_scene(
    cfg: &SynthConfig,
    registry: &ActionRegistry,
    maps: &[OffsetMap],
    rng: &mut ChaCha8Rng,
) -> Option<Placement> {
    let (w_img, h_img) = (cfg.image_width, cfg.image_height);
    let noise = Normal::new(0.0, cfg.offset_noise.max(0.0)).expect("finite noise");
    let mut p = Placement {
        persons: Vec::new(),
        poses: Vec::new(),
        objects: Vec::new(),
        interactions: Vec::new(),
        targets: Vec::new(),
    };

    for person in 0..cfg.persons_per_scene {
        let mut placed = false;
        for _ in 0..200 {
            let pw = rng.random_range(0.09..0.16) * w_img;
            let ph = pw * rng.random_range(1.6..2.4);
            if pw >= w_img || ph >= h_img {
                return None;
            }
            let x = rng.random_range(0.0..w_img - pw);
            let y = rng.random_range(0.0..h_img - ph);
            let pb = BBox::new(x, y, x + pw, y + ph).expect("positive size");
            if p.persons.iter().any(|q| iou(q, &pb) > 0.05) {
                continue;
            }
            let z = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];

            let n_verbs = rng.random_range(cfg.min_actions..=cfg.max_actions.max(cfg.min_actions));
            let mut verbs: Vec<usize> = (0..registry.num_verbs()).collect();
            verbs.shuffle(rng);
            verbs.truncate(n_verbs.min(registry.num_verbs()));
            verbs.sort_unstable();

            let mut new_objects: Vec<SceneObject> = Vec::new();
            let mut new_records = Vec::new();
            let mut new_targets = Vec::new();
            let mut ok = true;
            for &v in &verbs {
                let entries: Vec<usize> = (0..registry.entries().len())
                    .filter(|&e| registry.entry(e).verb == v)
                    .collect();
                for e in entries {
                    let spec = registry.entry(e);
                    let Some(slot) = spec.slot else {
                        new_records.push((e, None));
                        continue;
                    };
                    let latent = maps[slot].apply(&z);
                    let noisy = RelOffset::new(
                        latent.tx + noise.sample(rng),
                        latent.ty + noise.sample(rng),
                        latent.tw + noise.sample(rng),
                        latent.th + noise.sample(rng),
                    );
                    let ob = match decode_rel(&noisy, &pb) {
                        Ok(b) if b.contained_in(w_img, h_img) => b,
                        _ => {
                            ok = false;
                            break;
                        }
                    };
                    if objects_conflict(&ob, &p.objects) || objects_conflict(&ob, &new_objects) {
                        ok = false;
                        break;
                    }
                    new_records.push((e, Some(p.objects.len() + new_objects.len())));
                    new_targets.push((latent, p.objects.len() + new_objects.len()));
                    new_objects.push(SceneObject {
                        bbox: ob,
                        category: target_category(rng, &spec.name, spec.role),
                        ignore: false,
                    });
                }
                if !ok {
                    break;
                }
            }
            if !ok {
                continue;
            }
            // candidate layout must keep every target separable from every
            // other object as seen from every person
            let mut trial = Placement {
                persons: p.persons.clone(),
                poses: p.poses.clone(),
                objects: p.objects.clone(),
                interactions: Vec::new(),
                targets: p.targets.clone(),
            };
            trial.persons.push(pb);
            trial.objects.extend(new_objects.iter().cloned());
            trial
                .targets
                .extend(new_targets.iter().map(|&(l, o)| (person, l, o)));
            let separable = trial.targets.iter().all(|&(tp, latent, tobj)| {
                trial.objects.iter().enumerate().all(|(oi, o)| {
                    oi == tobj
                        || encode_rel(&o.bbox, &trial.persons[tp]).sq_dist(&latent).sqrt()
                            >= cfg.min_separation
                })
            });
            if !separable {
                continue;
            }
            p.persons.push(pb);
            p.poses.push(z);
            p.objects = trial.objects;
            p.targets = trial.targets;
            for (e, obj) in new_records {
                p.interactions.push(Interaction {
                    person,
                    entry: e,
                    target: obj.map(Target::Object),
                });
            }
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }

    // Distractors: an entry's offset map applied to a random person with a
    // fresh pose, so they look like plausible targets of that entry.
    let n_slots = registry.num_slots();
    for _ in 0..cfg.distractors_per_scene {
        let mut placed = false;
        for _ in 0..400 {
            let (anchor, slot) = if n_slots == 0 || p.persons.is_empty() {
                (None, 0)
            } else {
                (Some(rng.random_range(0..p.persons.len())), rng.random_range(0..n_slots))
            };
            let b = match anchor {
                Some(a) => {
                    let z = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                    match decode_rel(&maps[slot].apply(&z), &p.persons[a]) {
                        Ok(b) => b,
                        Err(_) => continue,
                    }
                }
                None => background_proposals(w_img, h_img, 1, rng)[0],
            };
            if !b.contained_in(w_img, h_img)
                || objects_conflict(&b, &p.objects)
                || confusable(&b, &p, cfg.min_separation, None)
            {
                continue;
            }
            let spec = registry.entry(registry.slot_entry(slot.min(n_slots.saturating_sub(1))));
            let category = if n_slots == 0 {
                rng.random_range(1..SYNTH_CATEGORIES.len())
            } else {
                target_category(rng, &spec.name, spec.role)
            };
            p.objects.push(SceneObject {
                bbox: b,
                category,
                ignore: false,
            });
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }
    Some(p)
}

/// Generate a synthetic dataset. Pure in `(cfg, cfg.seed)`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Dataset {
    let registry = match &cfg.actions {
        Some(v) => ActionRegistry::new(v.clone()).expect("valid synthetic action list"),
        None => ActionRegistry::vcoco(),
    };
    let maps = offset_maps(&registry);
    let mut scenes = Vec::with_capacity(cfg.scenes);
    for i in 0..cfg.scenes {
        let image_id = cfg.first_image_id + i as u64;
        let mut rng = seed::rng(cfg.seed, &[0x5CE7E, image_id]);
        let placement = loop {
            if let Some(p) = try_place_scene(cfg, &registry, &maps, &mut rng) {
                break p;
            }
        };
        let mut gt: Vec<BBox> = placement.persons.clone();
        gt.extend(placement.objects.iter().map(|o| o.bbox));
        let mut proposals = jitter_proposals(
            &gt,
            cfg.image_width,
            cfg.image_height,
            cfg.jitter_copies,
            cfg.jitter_magnitude,
            &mut rng,
        );
        proposals.extend(background_proposals(
            cfg.image_width,
            cfg.image_height,
            cfg.background_proposals,
            &mut rng,
        ));
        scenes.push(Scene {
            image_id,
            width: cfg.image_width,
            height: cfg.image_height,
            persons: placement.persons,
            objects: placement.objects,
            interactions: placement.interactions,
            proposals,
            latent: Some(Latent {
                poses: placement.poses,
                feature_seed: seed::derive(cfg.seed, &[0xFEA7, image_id]),
            }),
        });
    }
    Dataset {
        categories: SYNTH_CATEGORIES.iter().map(|s| s.to_string()).collect(),
        registry,
        scenes,
        generator: Some(serde_json::to_value(cfg).expect("config serializes")),
    }
}

/// Offset maps for every density slot of `registry`.
pub fn offset_maps(registry: &ActionRegistry) -> Vec<OffsetMap> {
    (0..registry.num_slots())
        .map(|s| {
            let e = registry.entry(registry.slot_entry(s));
            OffsetMap::for_entry(&e.name, e.role)
        })
        .collect()
}

/// A small registry covering every role kind, for quick experiments.
pub fn compact_actions() -> Vec<VerbDef> {
    let v = |name: &str, roles: Vec<Role>| VerbDef {
        name: name.into(),
        roles,
        person_targets: false,
    };
    vec![
        v("carry", vec![Role::Object]),
        v("throw", vec![Role::Object]),
        v("sit", vec![Role::Object]),
        v("look", vec![Role::Object]),
        v("cut", vec![Role::Object, Role::Instrument]),
        v("smile", vec![]),
    ]
}
