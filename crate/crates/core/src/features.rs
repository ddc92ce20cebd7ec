//! Per-box appearance features: RoIAlign over dense maps and the providers
//! that stand in for a CNN backbone.
//!
//! # Feature file format
//!
//! All integers little-endian.
//!
//! | bytes | content                       |
//! |-------|-------------------------------|
//! | 4     | magic `HOIF`                  |
//! | 4     | format version (`u32`, = 1)   |
//! | 4     | feature dim `D` (`u32`)       |
//! | 8     | entry count `N` (`u64`)       |
//! | N × (8 + 4D) | key `u64`, then `D` × `f32` |
//!
//! Keys are [`feature_key`]`(image_id, proposal_index)`. Any tool that can
//! write this layout can feed precomputed backbone features to the engine.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::synthetic::POSE_DIM;
use crate::dataset::{ActionRegistry, Dataset, Scene, Target};
use crate::error::FeatureError;
use crate::geometry::{encode_rel, iou, BBox};
use crate::seed;

pub const FEATURE_MAGIC: &[u8; 4] = b"HOIF";
pub const FEATURE_VERSION: u32 = 1;
/// Proposal indices occupy the low 20 bits of a feature key.
pub const PROPOSAL_BITS: u32 = 20;

pub fn feature_key(image_id: u64, proposal: usize) -> u64 {
    (image_id << PROPOSAL_BITS) | proposal as u64
}

/// Dense map of shape `channels × height × width`, `stride` image pixels per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    stride: f64,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, stride: f64, data: Vec<f64>) -> Result<Self, FeatureError> {
        if channels == 0 || height == 0 || width == 0 || stride.is_nan() || stride <= 0.0 {
            return Err(FeatureError::Format("feature map dims and stride must be positive".into()));
        }
        if data.len() != channels * height * width {
            return Err(FeatureError::Dimension {
                expected: channels * height * width,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::Format("non-finite feature map value".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            stride,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize, stride: f64) -> Self {
        Self::new(channels, height, width, stride, vec![0.0; channels * height * width])
            .expect("valid dims")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stride(&self) -> f64 {
        self.stride
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Bilinear sample at continuous cell coordinates, where cell `(i, j)`
    /// has its center at `(i, j)`. Coordinates are clamped to the grid.
    fn bilinear(&self, c: usize, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
        let bot = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeature {
    /// Channel-major: `values[(c * pooled + i) * pooled + j]`.
    pub values: Vec<f64>,
    /// The box missed the map entirely and `values` are zeros.
    pub outside: bool,
}

/// Pool `bbox` into `pooled × pooled` bins, one bilinear sample at each bin
/// center. The box is clipped to the map extent first.
pub fn roi_align(map: &FeatureMap, bbox: &BBox, pooled: usize) -> RoiFeature {
    assert!(pooled >= 1, "pooled resolution must be at least 1");
    let extent_w = map.width as f64 * map.stride;
    let extent_h = map.height as f64 * map.stride;
    let n = map.channels * pooled * pooled;
    let Some(b) = bbox.clip(extent_w, extent_h) else {
        log::warn!("roi {:?} lies outside the feature map", bbox.to_array());
        return RoiFeature {
            values: vec![0.0; n],
            outside: true,
        };
    };
    let s = map.stride;
    let (x1, y1) = (b.x1() / s, b.y1() / s);
    let bw = b.width() / s / pooled as f64;
    let bh = b.height() / s / pooled as f64;
    let mut values = Vec::with_capacity(n);
    for c in 0..map.channels {
        for i in 0..pooled {
            // map coordinate u covers cell floor(u); cell centers sit at k + 0.5
            let y = y1 + (i as f64 + 0.5) * bh - 0.5;
            for j in 0..pooled {
                let x = x1 + (j as f64 + 0.5) * bw - 0.5;
                values.push(map.bilinear(c, y, x));
            }
        }
    }
    RoiFeature {
        values,
        outside: false,
    }
}

/// Source of per-box feature vectors.
///
/// `proposal` is the index of the scene proposal the box derives from, when
/// known; providers keyed by proposal need it, geometric ones ignore it.
pub trait FeatureProvider: Sync {
    fn dim(&self) -> usize;
    fn feature(&self, scene: &Scene, bbox: &BBox, proposal: Option<usize>) -> Result<Vec<f64>, FeatureError>;
}

/// Layout of synthetic feature vectors.
///
/// `[category one-hot | box offset to matched instance (4) | verb multi-hot |
/// pose | padding]`, plus seeded Gaussian noise on every entry. A box is
/// matched to the instance it overlaps most if that IoU is at least 0.5;
/// unmatched boxes get noise only.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticProvider {
    num_categories: usize,
    entry_verb: Vec<usize>,
    num_verbs: usize,
    dim: usize,
    noise: f64,
}

impl SyntheticProvider {
    pub fn new(num_categories: usize, registry: &ActionRegistry, dim: usize, noise: f64) -> Result<Self, FeatureError> {
        let need = Self::min_dim(num_categories, registry.num_verbs());
        if dim < need {
            return Err(FeatureError::Dimension {
                expected: need,
                got: dim,
            });
        }
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(FeatureError::Format(format!("feature noise must be a non-negative number, got {noise}")));
        }
        Ok(Self {
            num_categories,
            entry_verb: registry.entries().iter().map(|e| e.verb).collect(),
            num_verbs: registry.num_verbs(),
            dim,
            noise,
        })
    }

    pub fn for_dataset(dataset: &Dataset, dim: usize, noise: f64) -> Result<Self, FeatureError> {
        Self::new(dataset.categories.len(), &dataset.registry, dim, noise)
    }

    pub fn min_dim(num_categories: usize, num_verbs: usize) -> usize {
        num_categories + 4 + num_verbs + POSE_DIM
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    /// Noise-free code of a box.
    pub fn code(&self, scene: &Scene, bbox: &BBox) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let instances = scene.instances();
        let best = instances
            .iter()
            .enumerate()
            .map(|(i, inst)| (i, iou(&inst.bbox, bbox)))
            .filter(|&(_, o)| o >= 0.5)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        let Some((i, _)) = best else { return v };
        let inst = &instances[i];
        v[inst.category] = 1.0;
        let off = encode_rel(&inst.bbox, bbox).to_array();
        v[self.num_categories..self.num_categories + 4].copy_from_slice(&off);
        if let Target::Person(p) = inst.target {
            let base = self.num_categories + 4;
            for r in scene.interactions.iter().filter(|r| r.person == p) {
                v[base + self.entry_verb[r.entry]] = 1.0;
            }
            if let Some(lat) = &scene.latent {
                let at = base + self.num_verbs;
                v[at..at + POSE_DIM].copy_from_slice(&lat.poses[p]);
            }
        }
        v
    }
}

fn scene_feature_seed(scene: &Scene) -> u64 {
    match &scene.latent {
        Some(l) => l.feature_seed,
        None => seed::derive(scene.image_id, &[0xFEA7]),
    }
}

impl FeatureProvider for SyntheticProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn feature(&self, scene: &Scene, bbox: &BBox, _proposal: Option<usize>) -> Result<Vec<f64>, FeatureError> {
        let mut v = self.code(scene, bbox);
        if self.noise > 0.0 {
            let parts = bbox.to_array().map(f64::to_bits);
            let mut rng = seed::rng(scene_feature_seed(scene), &parts);
            for x in v.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *x += self.noise * n;
            }
        }
        Ok(v)
    }
}

/// Features looked up by `(image id, proposal index)` from a feature file.
#[derive(Debug, Clone, PartialEq)]
pub struct FileProvider {
    dim: usize,
    table: HashMap<u64, Vec<f32>>,
}

impl FileProvider {
    pub fn from_entries(dim: usize, entries: impl IntoIterator<Item = (u64, Vec<f32>)>) -> Result<Self, FeatureError> {
        let mut table = HashMap::new();
        for (k, v) in entries {
            if v.len() != dim {
                return Err(FeatureError::Dimension {
                    expected: dim,
                    got: v.len(),
                });
            }
            table.insert(k, v);
        }
        Ok(Self { dim, table })
    }

    /// Load a whole feature file; `expected_dim` guards against mixing
    /// features from a differently configured extractor.
    pub fn load(path: &Path, expected_dim: Option<usize>) -> Result<Self, FeatureError> {
        let bytes = std::fs::read(path)?;
        Self::parse(&bytes, expected_dim)
    }

    pub fn parse(bytes: &[u8], expected_dim: Option<usize>) -> Result<Self, FeatureError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| FeatureError::Format("truncated header".into()))?;
        if &magic != FEATURE_MAGIC {
            return Err(FeatureError::Format("bad magic, expected HOIF".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FEATURE_VERSION {
            return Err(FeatureError::Format(format!("unsupported feature file version {version}")));
        }
        let dim = read_u32(&mut r)? as usize;
        if let Some(want) = expected_dim {
            if want != dim {
                return Err(FeatureError::Format(format!(
                    "feature file has dim {dim}, configuration expects {want}"
                )));
            }
        }
        let count = read_u64(&mut r)?;
        let record = 8 + 4 * dim as u64;
        if (r.len() as u64) != count.saturating_mul(record) {
            return Err(FeatureError::Format(format!(
                "expected {count} records of {record} bytes, found {} payload bytes",
                r.len()
            )));
        }
        let mut table = HashMap::with_capacity(count as usize);
        for _ in 0..count {
            let key = read_u64(&mut r)?;
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                let mut b = [0u8; 4];
                r.read_exact(&mut b).map_err(|_| FeatureError::Format("truncated record".into()))?;
                v.push(f32::from_le_bytes(b));
            }
            table.insert(key, v);
        }
        Ok(Self { dim, table })
    }

    pub fn get(&self, key: u64) -> Result<&[f32], FeatureError> {
        self.table.get(&key).map(Vec::as_slice).ok_or(FeatureError::NotFound(key))
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32, FeatureError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| FeatureError::Format("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64, FeatureError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| FeatureError::Format("truncated file".into()))?;
    Ok(u64::from_le_bytes(b))
}

impl FeatureProvider for FileProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn feature(&self, scene: &Scene, _bbox: &BBox, proposal: Option<usize>) -> Result<Vec<f64>, FeatureError> {
        let p = proposal.ok_or_else(|| {
            FeatureError::Format(format!(
                "scene {}: file features need the proposal index of every box",
                scene.image_id
            ))
        })?;
        Ok(self.get(feature_key(scene.image_id, p))?.iter().map(|&x| x as f64).collect())
    }
}

/// Write a feature file. Entries are written in the given order.
pub fn write_feature_file<W: Write>(mut w: W, dim: usize, entries: &[(u64, Vec<f32>)]) -> Result<(), FeatureError> {
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    let dim32 = u32::try_from(dim).map_err(|_| FeatureError::Format("feature dim exceeds u32".into()))?;
    w.write_all(&dim32.to_le_bytes())?;
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (k, v) in entries {
        if v.len() != dim {
            return Err(FeatureError::Dimension {
                expected: dim,
                got: v.len(),
            });
        }
        w.write_all(&k.to_le_bytes())?;
        for x in v {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Features of every proposal of every scene, as feature-file entries.
pub fn export_features(provider: &dyn FeatureProvider, scenes: &[Scene]) -> Result<Vec<(u64, Vec<f32>)>, FeatureError> {
    let mut out = Vec::new();
    for s in scenes {
        for (i, b) in s.proposals.iter().enumerate() {
            let v = provider.feature(s, b, Some(i))?;
            out.push((feature_key(s.image_id, i), v.iter().map(|&x| x as f32).collect()));
        }
    }
    Ok(out)
}

/// Paint each instance's code (category one-hot, verb multi-hot and pose for
/// persons) into the cells its box covers; later instances overwrite
/// earlier ones where they overlap.
pub fn render_feature_map(scene: &Scene, provider: &SyntheticProvider, stride: f64) -> FeatureMap {
    let width = (scene.width / stride).ceil().max(1.0) as usize;
    let height = (scene.height / stride).ceil().max(1.0) as usize;
    let channels = provider.num_categories + provider.num_verbs + POSE_DIM;
    let mut map = FeatureMap::zeros(channels, height, width, stride);
    for inst in scene.instances() {
        let code = provider.code(scene, &inst.bbox);
        // drop the 4 offset entries: a map has no notion of "the box"
        let mut c: Vec<f64> = code[..provider.num_categories].to_vec();
        c.extend_from_slice(&code[provider.num_categories + 4..provider.num_categories + 4 + provider.num_verbs + POSE_DIM]);
        let b = inst.bbox;
        let y0 = (b.y1() / stride).floor() as usize;
        let y1 = ((b.y2() / stride).ceil() as usize).min(height);
        let x0 = (b.x1() / stride).floor() as usize;
        let x1 = ((b.x2() / stride).ceil() as usize).min(width);
        for y in y0..y1 {
            for x in x0..x1 {
                for (ch, &val) in c.iter().enumerate() {
                    map.set(ch, y, x, val);
                }
            }
        }
    }
    map
}

/// RoIAlign over a per-scene feature map.
pub struct MapProvider {
    maps: HashMap<u64, FeatureMap>,
    channels: usize,
    pooled: usize,
}

impl MapProvider {
    pub fn new(maps: HashMap<u64, FeatureMap>, pooled: usize) -> Result<Self, FeatureError> {
        let channels = maps.values().next().map_or(0, FeatureMap::channels);
        if maps.values().any(|m| m.channels() != channels) {
            return Err(FeatureError::Format("feature maps disagree on channel count".into()));
        }
        if pooled == 0 {
            return Err(FeatureError::Format("pooled resolution must be positive".into()));
        }
        Ok(Self {
            maps,
            channels,
            pooled,
        })
    }
}

impl FeatureProvider for MapProvider {
    fn dim(&self) -> usize {
        self.channels * self.pooled * self.pooled
    }

    fn feature(&self, scene: &Scene, bbox: &BBox, _proposal: Option<usize>) -> Result<Vec<f64>, FeatureError> {
        let map = self.maps.get(&scene.image_id).ok_or(FeatureError::NotFound(scene.image_id))?;
        Ok(roi_align(map, bbox, self.pooled).values)
    }
}

/// Random unit-variance map, for tests and benchmarks.
pub fn random_map<R: Rng>(channels: usize, height: usize, width: usize, stride: f64, rng: &mut R) -> FeatureMap {
    let data = (0..channels * height * width).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    FeatureMap::new(channels, height, width, stride, data).expect("valid dims")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic::{generate_synthetic, SynthConfig};
    use proptest::prelude::*;

    fn map2x2() -> FeatureMap {
        FeatureMap::new(1, 2, 2, 1.0, vec![0.0, 1.0, 2.0, 3.0]).unwrap()
    }

    #[test]
    fn roi_align_examples() {
        let b = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        assert_eq!(roi_align(&map2x2(), &b, 1).values, vec![1.5]);

        let c = FeatureMap::new(3, 5, 6, 4.0, vec![0.7; 90]).unwrap();
        let f = roi_align(&c, &BBox::new(3.0, 2.0, 17.5, 19.0).unwrap(), 7);
        assert_eq!(f.values.len(), 3 * 49);
        assert!(f.values.iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn outside_box_gives_flagged_zeros() {
        let f = roi_align(&map2x2(), &BBox::new(5.0, 5.0, 9.0, 9.0).unwrap(), 2);
        assert!(f.outside);
        assert_eq!(f.values, vec![0.0; 4]);
    }

    #[test]
    fn integer_shift_equivariance() {
        let mut rng = seed::rng(3, &[]);
        let big = random_map(2, 12, 12, 2.0, &mut rng);
        // shift contents by (dy, dx) = (3, 2) cells
        let mut shifted = FeatureMap::zeros(2, 12, 12, 2.0);
        for c in 0..2 {
            for y in 3..12 {
                for x in 2..12 {
                    shifted.set(c, y, x, big.get(c, y - 3, x - 2));
                }
            }
        }
        let b = BBox::new(1.0, 2.0, 9.0, 11.0).unwrap();
        let a = roi_align(&big, &b, 3).values;
        let s = roi_align(&shifted, &b.translate(4.0, 6.0), 3).values;
        for (x, y) in a.iter().zip(&s) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn roi_align_is_linear_and_bounded(
            seed in any::<u64>(),
            alpha in -3.0..3.0f64,
            beta in -3.0..3.0f64,
            x1 in 0.0..30.0f64, y1 in 0.0..20.0f64, w in 0.5..30.0f64, h in 0.5..30.0f64,
            pooled in 1usize..5,
        ) {
            let mut rng = seed::rng(seed, &[]);
            let a = random_map(2, 10, 16, 2.0, &mut rng);
            let b = random_map(2, 10, 16, 2.0, &mut rng);
            let mix: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| alpha * x + beta * y).collect();
            let m = FeatureMap::new(2, 10, 16, 2.0, mix).unwrap();
            let bx = BBox::new(x1, y1, x1 + w, y1 + h).unwrap();
            let fa = roi_align(&a, &bx, pooled).values;
            let fb = roi_align(&b, &bx, pooled).values;
            let fm = roi_align(&m, &bx, pooled).values;
            for i in 0..fm.len() {
                prop_assert!((fm[i] - (alpha * fa[i] + beta * fb[i])).abs() < 1e-9);
            }
            let lo = a.data().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = a.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(fa.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
    }

    fn synth() -> Dataset {
        generate_synthetic(&SynthConfig {
            scenes: 3,
            seed: 17,
            ..SynthConfig::default()
        })
    }

    #[test]
    fn synthetic_features_are_deterministic_and_coded() {
        let ds = synth();
        let p = SyntheticProvider::for_dataset(&ds, 64, 0.1).unwrap();
        let s = &ds.scenes[0];
        let b = s.persons[0];
        assert_eq!(p.feature(s, &b, None).unwrap(), p.feature(s, &b, None).unwrap());

        let clean = SyntheticProvider::for_dataset(&ds, 64, 0.0).unwrap();
        let f0 = clean.feature(s, &b, None).unwrap();
        assert_eq!(f0[0], 1.0);
        let verbs = s.person_verbs(0, &ds.registry);
        let base = ds.categories.len() + 4;
        let hot: Vec<usize> = (0..ds.registry.num_verbs()).filter(|&v| f0[base + v] == 1.0).collect();
        assert_eq!(hot, verbs);
        let noisy = p.feature(s, &b, None).unwrap();
        let d: f64 = f0.iter().zip(&noisy).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(d > 0.0);
    }

    #[test]
    fn identical_latent_codes_give_identical_features() {
        let mut ds = synth();
        let s = &mut ds.scenes[0];
        // give person 1 person 0's actions and pose
        let acts: Vec<_> = s.interactions.iter().filter(|r| r.person == 0).map(|r| r.entry).collect();
        s.interactions.retain(|r| r.person != 1);
        for e in acts {
            s.interactions.push(crate::dataset::Interaction { person: 1, entry: e, target: None });
        }
        let lat = s.latent.as_mut().unwrap();
        lat.poses[1] = lat.poses[0];
        let p = SyntheticProvider::for_dataset(&ds, 64, 0.0).unwrap();
        let s = &ds.scenes[0];
        assert_eq!(p.feature(s, &s.persons[0], None).unwrap(), p.feature(s, &s.persons[1], None).unwrap());
    }

    #[test]
    fn unmatched_box_is_pure_noise() {
        let ds = synth();
        let p = SyntheticProvider::for_dataset(&ds, 64, 0.0).unwrap();
        let s = &ds.scenes[0];
        let far = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert!(p.feature(s, &far, None).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_file_round_trip_and_errors() {
        let entries = vec![(feature_key(4, 0), vec![1.5f32, -2.0, 3.25]), (feature_key(4, 1), vec![0.1f32, f32::MIN_POSITIVE, 7.0])];
        let mut buf = Vec::new();
        write_feature_file(&mut buf, 3, &entries).unwrap();
        let fp = FileProvider::parse(&buf, Some(3)).unwrap();
        for (k, v) in &entries {
            let got = fp.get(*k).unwrap();
            assert_eq!(got.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), v.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
        assert!(matches!(fp.get(feature_key(5, 0)), Err(FeatureError::NotFound(_))));
        assert!(matches!(FileProvider::parse(&buf, Some(2)), Err(FeatureError::Format(_))));
        assert!(matches!(FileProvider::parse(&buf[..buf.len() - 1], None), Err(FeatureError::Format(_))));
    }

    #[test]
    fn file_provider_serves_exported_synthetic_features() {
        let ds = synth();
        let p = SyntheticProvider::for_dataset(&ds, 48, 0.1).unwrap();
        let entries = export_features(&p, &ds.scenes).unwrap();
        let mut buf = Vec::new();
        write_feature_file(&mut buf, 48, &entries).unwrap();
        let fp = FileProvider::parse(&buf, Some(48)).unwrap();
        let s = &ds.scenes[1];
        let a = fp.feature(s, &s.proposals[3], Some(3)).unwrap();
        let b = p.feature(s, &s.proposals[3], None).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(*x, *y as f32 as f64);
        }
        assert!(fp.feature(s, &s.proposals[3], None).is_err());
    }

    #[test]
    fn rendered_map_recovers_person_code() {
        let ds = synth();
        let p = SyntheticProvider::for_dataset(&ds, 64, 0.0).unwrap();
        let s = &ds.scenes[0];
        let map = render_feature_map(s, &p, 4.0);
        let mp = MapProvider::new([(s.image_id, map)].into_iter().collect(), 3).unwrap();
        let f = mp.feature(s, &s.persons[0], None).unwrap();
        let code = p.code(s, &s.persons[0]);
        let c = ds.categories.len();
        // center bin of channel k sits at index k * 9 + 4
        let centre = |k: usize| f[k * 9 + 4];
        assert_eq!(centre(0), 1.0);
        for v in 0..ds.registry.num_verbs() {
            assert_eq!(centre(c + v), code[c + 4 + v]);
        }
    }
}
