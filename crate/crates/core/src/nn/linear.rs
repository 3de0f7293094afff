//! Fully-connected layer.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::init;

/// Dense layer `y = x . w + b` with `w: (in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Array2<f32>,
    pub b: Array1<f32>,
}

#[derive(Debug, Clone)]
pub struct LinearGrad {
    pub w: Array2<f32>,
    pub b: Array1<f32>,
}

impl Linear {
    pub fn he<R: Rng>(rng: &mut R, n_in: usize, n_out: usize) -> Self {
        Linear {
            w: init::he_normal(rng, (n_in, n_out), n_in),
            b: Array1::zeros(n_out),
        }
    }

    pub fn xavier<R: Rng>(rng: &mut R, n_in: usize, n_out: usize) -> Self {
        Linear {
            w: init::xavier_uniform(rng, (n_in, n_out), n_in, n_out),
            b: Array1::zeros(n_out),
        }
    }

    pub fn n_in(&self) -> usize {
        self.w.dim().0
    }

    pub fn n_out(&self) -> usize {
        self.w.dim().1
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// `x: (batch, in)` -> `(batch, out)`.
    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    /// Returns parameter gradients and the gradient w.r.t. the input.
    pub fn backward(&self, x: &Array2<f32>, gy: &Array2<f32>) -> (LinearGrad, Array2<f32>) {
        let gw = x.t().dot(gy);
        let gb = gy.sum_axis(Axis(0));
        let gx = gy.dot(&self.w.t());
        (LinearGrad { w: gw, b: gb }, gx)
    }

    pub fn zero_grad(&self) -> LinearGrad {
        LinearGrad {
            w: Array2::zeros(self.w.dim()),
            b: Array1::zeros(self.b.len()),
        }
    }
}

impl LinearGrad {
    pub fn add_assign(&mut self, other: &LinearGrad) {
        self.w += &other.w;
        self.b += &other.b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn forward_matches_manual() {
        let lin = Linear {
            w: array![[1.0f32, 2.0], [3.0, 4.0], [5.0, 6.0]],
            b: array![0.5f32, -0.5],
        };
        let x = array![[1.0f32, 0.0, 2.0]];
        let y = lin.forward(&x);
        assert_eq!(y, array![[11.5f32, 13.5]]);
    }

    #[test]
    fn backward_finite_difference() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut lin = Linear::he(&mut rng, 4, 3);
        let x = init::normal(&mut rng, (2, 4), 1.0);
        // loss = sum(forward(x))
        let gy = Array2::ones((2, 3));
        let (grads, gx) = lin.backward(&x, &gy);
        let h = 1e-3f32;
        for idx in [(0usize, 0usize), (2, 1), (3, 2)] {
            let orig = lin.w[idx];
            lin.w[idx] = orig + h;
            let up: f32 = lin.forward(&x).sum();
            lin.w[idx] = orig - h;
            let dn: f32 = lin.forward(&x).sum();
            lin.w[idx] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!(
                (fd - grads.w[idx]).abs() < 1e-2,
                "fd {fd} vs analytic {}",
                grads.w[idx]
            );
        }
        // input gradient: each input feeds all outputs via its weight row
        for i in 0..4 {
            let expect: f32 = lin.w.row(i).sum();
            assert!((gx[[0, i]] - expect).abs() < 1e-5);
        }
    }
}
