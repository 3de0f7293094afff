//! Adam optimizer over dynamically-shaped parameter views.

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};

/// Adaptive-moment estimation. Moment buffers are aligned with the caller's
/// parameter visit order, which must stay identical between steps.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: Vec<(ArrayD<f32>, ArrayD<f32>)>,
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update. `params` pairs each parameter view with its
    /// gradient view, in a stable order.
    pub fn step(&mut self, params: Vec<(ArrayViewMutD<'_, f32>, ArrayViewD<'_, f32>)>, lr: f64) {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|(p, _)| {
                    (
                        ArrayD::zeros(p.raw_dim()),
                        ArrayD::zeros(p.raw_dim()),
                    )
                })
                .collect();
        }
        assert_eq!(
            self.moments.len(),
            params.len(),
            "parameter count changed between optimizer steps"
        );
        self.t += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for ((mut p, g), (m, v)) in params.into_iter().zip(self.moments.iter_mut()) {
            assert_eq!(p.shape(), m.shape(), "parameter shape changed");
            ndarray::Zip::from(&mut p)
                .and(&g)
                .and(m)
                .and(v)
                .for_each(|pv, &gv, mv, vv| {
                    let g64 = gv as f64;
                    let m64 = b1 * (*mv as f64) + (1.0 - b1) * g64;
                    let v64 = b2 * (*vv as f64) + (1.0 - b2) * g64 * g64;
                    *mv = m64 as f32;
                    *vv = v64 as f32;
                    let mhat = m64 / bc1;
                    let vhat = v64 / bc2;
                    *pv = ((*pv as f64) - lr * mhat / (vhat.sqrt() + self.eps)) as f32;
                });
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};

    #[test]
    fn minimizes_a_quadratic() {
        // f(x) = sum((x - 3)^2), gradient 2(x - 3)
        let mut x = Array1::<f32>::zeros(4);
        let mut opt = Adam::new();
        for _ in 0..400 {
            let g = x.mapv(|v| 2.0 * (v - 3.0));
            opt.step(
                vec![(x.view_mut().into_dyn(), g.view().into_dyn())],
                0.05,
            );
        }
        for &v in x.iter() {
            assert!((v - 3.0).abs() < 1e-2, "converged to {v}");
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        // with bias correction, |update| == lr when the gradient is constant
        let mut x = Array2::<f32>::zeros((2, 2));
        let g = Array2::<f32>::ones((2, 2));
        let mut opt = Adam::new();
        opt.step(vec![(x.view_mut().into_dyn(), g.view().into_dyn())], 0.1);
        for &v in x.iter() {
            assert!((v + 0.1).abs() < 1e-6, "step was {v}");
        }
    }
}
