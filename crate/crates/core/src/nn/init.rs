//! Seeded parameter initializers.

use ndarray::{Array, Dimension, ShapeBuilder};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// He/Kaiming normal: std = sqrt(2 / fan_in). Standard for ReLU layers.
pub fn he_normal<D, Sh, R>(rng: &mut R, shape: Sh, fan_in: usize) -> Array<f32, D>
where
    D: Dimension,
    Sh: ShapeBuilder<Dim = D>,
    R: Rng,
{
    let std = (2.0 / fan_in as f64).sqrt();
    normal(rng, shape, std)
}

/// Xavier/Glorot uniform: bound = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform<D, Sh, R>(
    rng: &mut R,
    shape: Sh,
    fan_in: usize,
    fan_out: usize,
) -> Array<f32, D>
where
    D: Dimension,
    Sh: ShapeBuilder<Dim = D>,
    R: Rng,
{
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid uniform bounds");
    Array::from_shape_simple_fn(shape, || dist.sample(rng) as f32)
}

/// Zero-mean Gaussian with the given standard deviation.
pub fn normal<D, Sh, R>(rng: &mut R, shape: Sh, std: f64) -> Array<f32, D>
where
    D: Dimension,
    Sh: ShapeBuilder<Dim = D>,
    R: Rng,
{
    let dist = Normal::new(0.0, std).expect("valid normal parameters");
    Array::from_shape_simple_fn(shape, || dist.sample(rng) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn seeded_init_is_reproducible() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let x: ndarray::Array2<f32> = he_normal(&mut a, (4, 5), 5);
        let y: ndarray::Array2<f32> = he_normal(&mut b, (4, 5), 5);
        assert_eq!(x, y);
    }

    #[test]
    fn he_scale_tracks_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: ndarray::Array2<f32> = he_normal(&mut rng, (200, 50), 50);
        let std = (x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
        let expect = (2.0f64 / 50.0).sqrt();
        assert!((std - expect).abs() < expect * 0.2, "std {std} vs {expect}");
    }
}
