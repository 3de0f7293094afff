//! Shared test fixtures: procedurally generated digit-like images that a
//! small classifier can learn, used where the real datasets are too heavy
//! or unavailable.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use recon_attn::types::ImageBatch;

/// Ten distinguishable glyphs: a vertical and a horizontal bar whose
/// positions encode the class, with +-2px jitter and light pixel noise.
pub fn synthetic_digits(n: usize, seed: u64) -> (ImageBatch, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f64, 0.05).unwrap();
    let mut data = Array3::<f32>::zeros((n, 28, 28));
    let mut labels = Vec::with_capacity(n);
    for s in 0..n {
        let class = rng.random_range(0..10u8);
        labels.push(class);
        let dx = rng.random_range(-2i32..=2);
        let dy = rng.random_range(-2i32..=2);
        let vcol = 4 + 4 * (class as i32 % 5) + dx;
        let hrow = if class < 5 { 8 } else { 18 } + dy;
        for r in 4..24 {
            let rr = r + dy;
            if (0..28).contains(&rr) && (0..28).contains(&vcol) {
                data[[s, rr as usize, vcol as usize]] = 0.9;
                if vcol + 1 < 28 {
                    data[[s, rr as usize, (vcol + 1) as usize]] = 0.9;
                }
            }
        }
        for c in 4..24 {
            let cc = c + dx;
            if (0..28).contains(&cc) && (0..28).contains(&hrow) {
                data[[s, hrow as usize, cc as usize]] = 0.9;
            }
        }
        for v in data.index_axis_mut(ndarray::Axis(0), s).iter_mut() {
            *v = (*v + noise.sample(&mut rng) as f32).clamp(0.0, 1.0);
        }
    }
    (ImageBatch::new(data).unwrap(), labels)
}
