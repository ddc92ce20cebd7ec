//! Target-location densities over relative box offsets.
//!
//! Two scoring paths live here. The fixed-width path scores a candidate by an
//! unnormalized isotropic Gaussian around the predicted mean, which is all the
//! object-selection argmax needs. The mixture path uses fully normalized
//! diagonal Gaussians because it is trained by negative log-likelihood.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::RelOffset;

/// Default width of the fixed-width compatibility term.
pub const DEFAULT_SIGMA: f64 = 0.3;
/// Lower bound added to every learned mixture standard deviation.
pub const DEFAULT_SIGMA_FLOOR: f64 = 0.3;
/// Default cluster count for the appearance-blind offset baseline.
pub const DEFAULT_KMEANS_K: usize = 2;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `exp(-|b_rel - mu|^2 / (2 sigma^2))`, in `(0, 1]`.
pub fn gaussian_compat(b_rel: &RelOffset, mu: &RelOffset, sigma: f64) -> f64 {
    (-b_rel.sq_dist(mu) / (2.0 * sigma * sigma)).exp()
}

/// One human/action slot of a diagonal Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub weights: Vec<f64>,
    pub means: Vec<RelOffset>,
    pub sigmas: Vec<[f64; 4]>,
}

impl Mixture {
    pub fn single(mean: RelOffset, sigma: f64) -> Self {
        Self {
            weights: vec![1.0],
            means: vec![mean],
            sigmas: vec![[sigma; 4]],
        }
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// Checks the simplex and floor constraints.
    pub fn validate(&self, sigma_floor: f64) -> Result<(), String> {
        let m = self.weights.len();
        if m == 0 || self.means.len() != m || self.sigmas.len() != m {
            return Err(format!(
                "inconsistent component counts: {} weights, {} means, {} sigmas",
                m,
                self.means.len(),
                self.sigmas.len()
            ));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || self.weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(format!("mixing weights {:?} are not on the simplex", self.weights));
        }
        if self
            .sigmas
            .iter()
            .flatten()
            .any(|&s| s.is_nan() || s < sigma_floor - 1e-12)
        {
            return Err(format!("a sigma entry is below the floor {sigma_floor}"));
        }
        Ok(())
    }

    /// Index of the heaviest component; ties go to the lower index.
    pub fn dominant(&self) -> usize {
        let mut best = 0;
        for (i, w) in self.weights.iter().enumerate() {
            if *w > self.weights[best] {
                best = i;
            }
        }
        best
    }
}

fn component_log_density(x: &RelOffset, mean: &RelOffset, sigma: &[f64; 4]) -> f64 {
    let xs = x.to_array();
    let ms = mean.to_array();
    let mut acc = 0.0;
    for i in 0..4 {
        let z = (xs[i] - ms[i]) / sigma[i];
        acc += -0.5 * LN_2PI - sigma[i].ln() - 0.5 * z * z;
    }
    acc
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Log of the normalized mixture density at `x`.
pub fn log_mixture_density(x: &RelOffset, mix: &Mixture) -> f64 {
    let terms: Vec<f64> = (0..mix.components())
        .map(|m| mix.weights[m].ln() + component_log_density(x, &mix.means[m], &mix.sigmas[m]))
        .collect();
    log_sum_exp(&terms)
}

/// `sum_m w_m N(x | mu_m, diag(sigma_m^2))`.
pub fn mixture_compat(x: &RelOffset, mix: &Mixture) -> f64 {
    log_mixture_density(x, mix).exp()
}

/// Summed smooth-L1 over the four coordinates.
pub fn smooth_l1(pred: &RelOffset, target: &RelOffset) -> f64 {
    smooth_l1_with_grad(&pred.to_array(), &target.to_array()).0
}

/// Smooth-L1 loss and its gradient with respect to `pred`.
pub fn smooth_l1_with_grad(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(target) {
        let d = p - t;
        if d.abs() < 1.0 {
            loss += 0.5 * d * d;
            grad.push(d);
        } else {
            loss += d.abs() - 0.5;
            grad.push(d.signum());
        }
    }
    (loss, grad)
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    let x = x.clamp(-30.0, 30.0);
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Raw network outputs for one mixture slot.
#[derive(Debug, Clone, Copy)]
pub struct MdnOutputs<'a> {
    /// `M` mixing logits (pre-softmax).
    pub weight_logits: &'a [f64],
    /// `4 M` means, component-major.
    pub means: &'a [f64],
    /// `4 M` pre-floor sigma parameters, or `None` for a fixed width.
    pub raw_sigmas: Option<&'a [f64]>,
    pub sigma_floor: f64,
    /// Width used on every coordinate when `raw_sigmas` is `None`.
    pub fixed_sigma: f64,
}

impl MdnOutputs<'_> {
    pub fn components(&self) -> usize {
        self.weight_logits.len()
    }

    pub fn mixture(&self) -> Mixture {
        let m = self.components();
        let weights = if m == 1 {
            vec![1.0]
        } else {
            softmax(self.weight_logits)
        };
        let means = (0..m)
            .map(|c| RelOffset::from_slice(&self.means[4 * c..4 * c + 4]))
            .collect();
        let sigmas = (0..m)
            .map(|c| {
                let mut s = [self.fixed_sigma; 4];
                if let Some(raw) = self.raw_sigmas {
                    for i in 0..4 {
                        s[i] = self.sigma_floor + softplus(raw[4 * c + i]);
                    }
                }
                s
            })
            .collect();
        Mixture {
            weights,
            means,
            sigmas,
        }
    }
}

/// Negative log-likelihood of one target under a mixture slot, with gradients
/// for every raw output.
#[derive(Debug, Clone, PartialEq)]
pub struct MdnLoss {
    pub nll: f64,
    pub d_weight_logits: Vec<f64>,
    pub d_means: Vec<f64>,
    pub d_raw_sigmas: Option<Vec<f64>>,
}

pub fn mdn_nll(target: &RelOffset, out: &MdnOutputs<'_>) -> MdnLoss {
    let mix = out.mixture();
    let m = mix.components();
    let x = target.to_array();

    let log_terms: Vec<f64> = (0..m)
        .map(|c| mix.weights[c].ln() + component_log_density(target, &mix.means[c], &mix.sigmas[c]))
        .collect();
    let log_g = log_sum_exp(&log_terms);
    let resp: Vec<f64> = log_terms.iter().map(|t| (t - log_g).exp()).collect();

    let d_weight_logits = if m == 1 {
        vec![0.0]
    } else {
        (0..m).map(|c| mix.weights[c] - resp[c]).collect()
    };

    let mut d_means = vec![0.0; 4 * m];
    let mut d_raw = out.raw_sigmas.map(|_| vec![0.0; 4 * m]);
    for c in 0..m {
        let mu = mix.means[c].to_array();
        for i in 0..4 {
            let s = mix.sigmas[c][i];
            let d = x[i] - mu[i];
            d_means[4 * c + i] = -resp[c] * d / (s * s);
            if let (Some(raw), Some(dr)) = (out.raw_sigmas, d_raw.as_mut()) {
                let d_sigma = resp[c] * (1.0 / s - d * d / (s * s * s));
                // d softplus / dx = sigmoid(x)
                dr[4 * c + i] = d_sigma * sigmoid(raw[4 * c + i]);
            }
        }
    }

    MdnLoss {
        nll: -log_g,
        d_weight_logits,
        d_means,
        d_raw_sigmas: d_raw,
    }
}

/// Output of [`kmeans`]: centers plus the objective after seeding and after
/// every Lloyd iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centers: Vec<RelOffset>,
    pub assignments: Vec<usize>,
    pub objective_history: Vec<f64>,
}

fn nearest(p: &RelOffset, centers: &[RelOffset]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = p.sq_dist(c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Asking for more clusters than points reduces `k` to the point count.
/// Panics on an empty point set.
pub fn kmeans(points: &[RelOffset], k: usize, seed: u64, max_iter: usize) -> KMeansFit {
    assert!(!points.is_empty(), "kmeans needs at least one point");
    let k = if k > points.len() {
        log::warn!(
            "kmeans: only {} offsets for k = {}; reducing k",
            points.len(),
            k
        );
        points.len()
    } else {
        k.max(1)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers = vec![points[rng.random_range(0..points.len())]];
    while centers.len() < k {
        let d2: Vec<f64> = points.iter().map(|p| nearest(p, &centers).1).collect();
        let total: f64 = d2.iter().sum();
        let idx = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        };
        centers.push(points[idx]);
    }

    let objective = |centers: &[RelOffset], assign: &[usize]| -> f64 {
        points
            .iter()
            .zip(assign)
            .map(|(p, &a)| p.sq_dist(&centers[a]))
            .sum()
    };

    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
    let mut history = vec![objective(&centers, &assignments)];
    for _ in 0..max_iter {
        let mut sums = vec![[0.0f64; 4]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            for (s, v) in sums[a].iter_mut().zip(p.to_array()) {
                *s += v;
            }
            counts[a] += 1;
        }
        for c in 0..k {
            // an empty cluster keeps its previous center
            if counts[c] > 0 {
                let n = counts[c] as f64;
                centers[c] = RelOffset::new(sums[c][0] / n, sums[c][1] / n, sums[c][2] / n, sums[c][3] / n);
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
        history.push(objective(&centers, &next));
        if next == assignments {
            break;
        }
        assignments = next;
    }

    KMeansFit {
        centers,
        assignments,
        objective_history: history,
    }
}

/// Appearance-blind compatibility: the best fixed-width score over the
/// cluster centers of an action.
pub fn kmeans_compat(b_rel: &RelOffset, centers: &[RelOffset], sigma: f64) -> f64 {
    centers
        .iter()
        .map(|c| gaussian_compat(b_rel, c, sigma))
        .fold(0.0, f64::max)
}
