//! Per-channel batch normalization for 4-D activations.

use ndarray::{Array1, Array4, Axis};

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
}

#[derive(Debug, Clone)]
pub struct BatchNorm2dGrad {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
}

/// Values saved by the training-mode forward pass for backward.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Array4<f32>,
    pub inv_std: Array1<f32>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
        }
    }

    pub fn n_params(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    /// Training-mode forward: normalizes with batch statistics and updates
    /// the running estimates (unbiased variance, momentum 0.1).
    pub fn forward_train(&mut self, x: &Array4<f32>) -> (Array4<f32>, BnCache) {
        let (b, c, h, w) = x.dim();
        let n = (b * h * w) as f64;
        let mut mean = Array1::<f32>::zeros(c);
        let mut var = Array1::<f32>::zeros(c);
        for ch in 0..c {
            let plane = x.index_axis(Axis(1), ch);
            let m: f64 = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
            let v: f64 = plane.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
            mean[ch] = m as f32;
            var[ch] = v as f32;
            let unbiased = if n > 1.0 { v * n / (n - 1.0) } else { v };
            self.running_mean[ch] =
                ((1.0 - MOMENTUM) * self.running_mean[ch] as f64 + MOMENTUM * m) as f32;
            self.running_var[ch] =
                ((1.0 - MOMENTUM) * self.running_var[ch] as f64 + MOMENTUM * unbiased) as f32;
        }
        let inv_std = var.mapv(|v| (1.0 / ((v as f64 + EPS).sqrt())) as f32);
        let mut xhat = x.clone();
        for ch in 0..c {
            let m = mean[ch];
            let is = inv_std[ch];
            xhat.index_axis_mut(Axis(1), ch)
                .mapv_inplace(|v| (v - m) * is);
        }
        let mut y = xhat.clone();
        for ch in 0..c {
            let g = self.gamma[ch];
            let be = self.beta[ch];
            y.index_axis_mut(Axis(1), ch).mapv_inplace(|v| v * g + be);
        }
        (y, BnCache { xhat, inv_std })
    }

    /// Inference-mode forward using the running statistics.
    pub fn forward_eval(&self, x: &Array4<f32>) -> Array4<f32> {
        let c = x.dim().1;
        let mut y = x.clone();
        for ch in 0..c {
            let m = self.running_mean[ch];
            let is = (1.0 / ((self.running_var[ch] as f64 + EPS).sqrt())) as f32;
            let g = self.gamma[ch];
            let be = self.beta[ch];
            y.index_axis_mut(Axis(1), ch)
                .mapv_inplace(|v| (v - m) * is * g + be);
        }
        y
    }

    pub fn backward(
        &self,
        cache: &BnCache,
        gy: &Array4<f32>,
    ) -> (BatchNorm2dGrad, Array4<f32>) {
        let (b, c, h, w) = gy.dim();
        let n = (b * h * w) as f64;
        let mut ggamma = Array1::<f32>::zeros(c);
        let mut gbeta = Array1::<f32>::zeros(c);
        let mut gx = Array4::<f32>::zeros(gy.dim());
        for ch in 0..c {
            let gy_c = gy.index_axis(Axis(1), ch);
            let xhat_c = cache.xhat.index_axis(Axis(1), ch);
            let sum_gy: f64 = gy_c.iter().map(|&v| v as f64).sum();
            let sum_gy_xhat: f64 = gy_c
                .iter()
                .zip(xhat_c.iter())
                .map(|(&g, &xh)| g as f64 * xh as f64)
                .sum();
            ggamma[ch] = sum_gy_xhat as f32;
            gbeta[ch] = sum_gy as f32;
            let scale = self.gamma[ch] as f64 * cache.inv_std[ch] as f64 / n;
            let mut gx_c = gx.index_axis_mut(Axis(1), ch);
            ndarray::Zip::from(&mut gx_c)
                .and(&gy_c)
                .and(&xhat_c)
                .for_each(|gxv, &g, &xh| {
                    *gxv = (scale * (n * g as f64 - sum_gy - xh as f64 * sum_gy_xhat)) as f32;
                });
        }
        (
            BatchNorm2dGrad {
                gamma: ggamma,
                beta: gbeta,
            },
            gx,
        )
    }
}

impl BatchNorm2dGrad {
    pub fn add_assign(&mut self, other: &BatchNorm2dGrad) {
        self.gamma += &other.gamma;
        self.beta += &other.beta;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init;
    use rand::SeedableRng;

    #[test]
    fn train_forward_standardizes_channels() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x: Array4<f32> = init::normal(&mut rng, (4, 3, 5, 5), 2.5);
        let mut bn = BatchNorm2d::new(3);
        let (y, _) = bn.forward_train(&x);
        for ch in 0..3 {
            let plane = y.index_axis(Axis(1), ch);
            let n = plane.len() as f64;
            let mean: f64 = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var: f64 = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-4, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x: Array4<f32> = init::normal(&mut rng, (2, 2, 3, 3), 1.0);
        let mut bn = BatchNorm2d::new(2);
        bn.gamma[0] = 1.3;
        bn.beta[1] = -0.2;
        // loss = sum of a fixed random weighting to break symmetry
        let wsum: Array4<f32> = init::normal(&mut rng, (2, 2, 3, 3), 1.0);
        let loss = |bn: &mut BatchNorm2d, x: &Array4<f32>| -> f64 {
            let (y, _) = bn.forward_train(x);
            y.iter()
                .zip(wsum.iter())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum()
        };
        let (y0, cache) = bn.clone().forward_train(&x);
        let _ = y0;
        let (grads, gx) = bn.backward(&cache, &wsum);
        let h = 1e-3f32;
        // parameter grads
        for ch in 0..2 {
            let orig = bn.gamma[ch];
            bn.gamma[ch] = orig + h;
            let up = loss(&mut bn.clone(), &x);
            bn.gamma[ch] = orig - h;
            let dn = loss(&mut bn.clone(), &x);
            bn.gamma[ch] = orig;
            let fd = (up - dn) / (2.0 * h as f64);
            assert!(
                (fd - grads.gamma[ch] as f64).abs() < 1e-2 * fd.abs().max(1.0),
                "gamma[{ch}] fd {fd} vs {}",
                grads.gamma[ch]
            );
        }
        // input grads on a few coordinates
        let mut xp = x.clone();
        for idx in [(0usize, 0usize, 0usize, 0usize), (1, 1, 2, 2), (0, 1, 1, 0)] {
            let orig = xp[idx];
            xp[idx] = orig + h;
            let up = loss(&mut bn.clone(), &xp);
            xp[idx] = orig - h;
            let dn = loss(&mut bn.clone(), &xp);
            xp[idx] = orig;
            let fd = (up - dn) / (2.0 * h as f64);
            assert!(
                (fd - gx[idx] as f64).abs() < 2e-2 * fd.abs().max(1.0),
                "x{idx:?} fd {fd} vs {}",
                gx[idx]
            );
        }
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let x = Array4::from_elem((1, 1, 2, 2), 3.0f32);
        let mut bn = BatchNorm2d::new(1);
        bn.running_mean[0] = 1.0;
        bn.running_var[0] = 4.0;
        let y = bn.forward_eval(&x);
        // (3 - 1) / 2 = 1
        assert!((y[[0, 0, 0, 0]] - 1.0).abs() < 1e-4);
    }
}
