//! Elementwise activations and small math helpers.

use ndarray::{Array1, ArrayView1, Dimension};

pub fn relu<D: Dimension>(x: &ndarray::Array<f32, D>) -> ndarray::Array<f32, D> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through ReLU given the *output* of the forward pass.
pub fn relu_backward<D: Dimension>(
    y: &ndarray::Array<f32, D>,
    gy: &ndarray::Array<f32, D>,
) -> ndarray::Array<f32, D> {
    let mut gx = gy.clone();
    gx.zip_mut_with(y, |g, &out| {
        if out <= 0.0 {
            *g = 0.0;
        }
    });
    gx
}

pub fn sigmoid<D: Dimension>(x: &ndarray::Array<f32, D>) -> ndarray::Array<f32, D> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Gradient through sigmoid given the forward output.
pub fn sigmoid_backward<D: Dimension>(
    y: &ndarray::Array<f32, D>,
    gy: &ndarray::Array<f32, D>,
) -> ndarray::Array<f32, D> {
    let mut gx = gy.clone();
    gx.zip_mut_with(y, |g, &out| *g *= out * (1.0 - out));
    gx
}

/// Numerically stable softmax of a score vector, computed in f64.
pub fn softmax(scores: ArrayView1<'_, f32>) -> Array1<f64> {
    let max = scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Array1<f64> = scores.mapv(|v| ((v as f64) - max).exp());
    let sum: f64 = exps.sum();
    exps / sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn relu_roundtrip() {
        let x = array![[-1.0f32, 0.0, 2.5]];
        let y = relu(&x);
        assert_eq!(y, array![[0.0, 0.0, 2.5]]);
        let gx = relu_backward(&y, &array![[1.0f32, 1.0, 1.0]]);
        assert_eq!(gx, array![[0.0, 0.0, 1.0]]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let s = array![0.1f32, 0.9, 0.3, 0.0];
        let p = softmax(s.view());
        assert!((p.sum() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn sigmoid_gradient_matches_analytic() {
        let x = array![0.3f32, -1.2];
        let y = sigmoid(&x);
        let g = sigmoid_backward(&y, &array![1.0f32, 1.0]);
        for (gi, yi) in g.iter().zip(y.iter()) {
            assert!((gi - yi * (1.0 - yi)).abs() < 1e-6);
        }
    }
}
