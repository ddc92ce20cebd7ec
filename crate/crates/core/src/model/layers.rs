use ndarray::{Array1, Array2, Axis};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((input, output)),
            b: Array1::zeros(output),
        }
    }

    /// Weights uniform in `±scale / sqrt(input)`, zero bias.
    pub fn init<R: Rng>(input: usize, output: usize, scale: f64, rng: &mut R) -> Self {
        let bound = scale / (input as f64).sqrt();
        let w = Array2::from_shape_fn((input, output), |_| rng.random_range(-bound..=bound));
        Self {
            w,
            b: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    /// Each output row is accumulated on its own in a fixed order, so a
    /// box's outputs do not depend on which other rows share the batch.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.output_dim()));
        for (xr, mut or) in x.outer_iter().zip(out.outer_iter_mut()) {
            let acc = or.as_slice_mut().expect("standard layout");
            for (&xv, wr) in xr.iter().zip(self.w.outer_iter()) {
                if xv == 0.0 {
                    continue;
                }
                let wr = wr.to_slice().expect("standard layout");
                for (a, &w) in acc.iter_mut().zip(wr) {
                    *a += xv * w;
                }
            }
            or += &self.b;
        }
        out
    }

    /// Accumulates parameter gradients into `grad`; returns `dL/dx` when asked.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear, want_dx: bool) -> Option<Array2<f64>> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        want_dx.then(|| dy.dot(&self.w.t()))
    }
}

pub(crate) fn relu(mut a: Array2<f64>) -> Array2<f64> {
    a.mapv_inplace(|v| v.max(0.0));
    a
}

/// Zero `d` wherever the ReLU output `out` was not positive.
pub(crate) fn relu_backward(mut d: Array2<f64>, out: &Array2<f64>) -> Array2<f64> {
    d.zip_mut_with(out, |g, &o| {
        if o <= 0.0 {
            *g = 0.0
        }
    });
    d
}

/// Two fully connected ReLU layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Trunk {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct TrunkCache {
    pub h1: Array2<f64>,
    pub h2: Array2<f64>,
}

impl Trunk {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::zeros(input, hidden),
            fc2: Linear::zeros(hidden, hidden),
        }
    }

    pub fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::init(input, hidden, 1.0, rng),
            fc2: Linear::init(hidden, hidden, 1.0, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> TrunkCache {
        let h1 = relu(self.fc1.forward(x));
        let h2 = relu(self.fc2.forward(&h1));
        TrunkCache { h1, h2 }
    }

    /// `dh2` is the gradient with respect to the trunk output (post-ReLU).
    pub fn backward(&self, x: &Array2<f64>, cache: &TrunkCache, dh2: Array2<f64>, grad: &mut Trunk) {
        let d2 = relu_backward(dh2, &cache.h2);
        let dh1 = self
            .fc2
            .backward(&cache.h1, &d2, &mut grad.fc2, true)
            .expect("dx requested");
        let d1 = relu_backward(dh1, &cache.h1);
        self.fc1.backward(x, &d1, &mut grad.fc1, false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn linear_forward_and_backward_by_hand() {
        let l = Linear {
            w: array![[1.0, -1.0], [0.5, 2.0]],
            b: array![0.1, 0.2],
        };
        let x = array![[2.0, 1.0]];
        assert_eq!(l.forward(&x), array![[2.6, 0.2]]);
        let mut g = Linear::zeros(2, 2);
        let dx = l.backward(&x, &array![[1.0, 3.0]], &mut g, true).unwrap();
        assert_eq!(g.w, array![[2.0, 6.0], [1.0, 3.0]]);
        assert_eq!(g.b, array![1.0, 3.0]);
        assert_eq!(dx, array![[-2.0, 6.5]]);
    }
}
