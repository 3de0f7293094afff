//! Object-capsule decoder: renders one class hypothesis back into a 28x28
//! image, and scores reconstructions against a target.
//!
//! The decoder input is the concatenation of all ten 16-d object capsules
//! (160 values) with every capsule except the selected class zeroed, so class
//! identity is carried positionally.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ops, Linear, LinearGrad};
use crate::types::{ObjectCapsuleSet, N_CLASSES, N_PIXELS, OBJECT_DIM};

pub const DECODER_INPUT: usize = N_CLASSES * OBJECT_DIM;
const HIDDEN1: usize = 512;
const HIDDEN2: usize = 1024;

/// Three fully-connected layers: 160 -> 512 -> 1024 -> 784, ReLU on hidden
/// layers, sigmoid on the output so pixels land in [0, 1].
#[derive(Debug, Clone)]
pub struct Decoder {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
}

#[derive(Debug, Clone)]
pub struct DecoderGrad {
    pub fc1: LinearGrad,
    pub fc2: LinearGrad,
    pub fc3: LinearGrad,
}

/// Activations saved for the backward pass.
pub struct DecoderCache {
    x: Array2<f32>,
    h1: Array2<f32>,
    h2: Array2<f32>,
    y: Array2<f32>,
}

impl DecoderCache {
    pub fn output(&self) -> &Array2<f32> {
        &self.y
    }
}

impl Decoder {
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        Decoder {
            fc1: Linear::he(rng, DECODER_INPUT, HIDDEN1),
            fc2: Linear::he(rng, HIDDEN1, HIDDEN2),
            fc3: Linear::xavier(rng, HIDDEN2, N_PIXELS),
        }
    }

    pub fn n_params(&self) -> usize {
        self.fc1.n_params() + self.fc2.n_params() + self.fc3.n_params()
    }

    /// `x: (n, 160)` -> pixels `(n, 784)` in [0, 1].
    pub fn forward(&self, x: &Array2<f32>) -> DecoderCache {
        let h1 = ops::relu(&self.fc1.forward(x));
        let h2 = ops::relu(&self.fc2.forward(&h1));
        let y = ops::sigmoid(&self.fc3.forward(&h2));
        DecoderCache {
            x: x.clone(),
            h1,
            h2,
            y,
        }
    }

    /// Output without retaining activations; used on no-gradient paths.
    pub fn forward_nograd(&self, x: &Array2<f32>) -> Array2<f32> {
        let h1 = ops::relu(&self.fc1.forward(x));
        let h2 = ops::relu(&self.fc2.forward(&h1));
        ops::sigmoid(&self.fc3.forward(&h2))
    }

    pub fn backward(&self, cache: &DecoderCache, gy: &Array2<f32>) -> (DecoderGrad, Array2<f32>) {
        let g3 = ops::sigmoid_backward(&cache.y, gy);
        let (gfc3, gh2) = self.fc3.backward(&cache.h2, &g3);
        let gh2 = ops::relu_backward(&cache.h2, &gh2);
        let (gfc2, gh1) = self.fc2.backward(&cache.h1, &gh2);
        let gh1 = ops::relu_backward(&cache.h1, &gh1);
        let (gfc1, gx) = self.fc1.backward(&cache.x, &gh1);
        (
            DecoderGrad {
                fc1: gfc1,
                fc2: gfc2,
                fc3: gfc3,
            },
            gx,
        )
    }

    pub fn zero_grad(&self) -> DecoderGrad {
        DecoderGrad {
            fc1: self.fc1.zero_grad(),
            fc2: self.fc2.zero_grad(),
            fc3: self.fc3.zero_grad(),
        }
    }
}

impl DecoderGrad {
    pub fn add_assign(&mut self, other: &DecoderGrad) {
        self.fc1.add_assign(&other.fc1);
        self.fc2.add_assign(&other.fc2);
        self.fc3.add_assign(&other.fc3);
    }
}

/// Builds the zero-masked decoder input for one selected class:
/// `(batch, 160)` with only block `class_idx` populated.
pub fn masked_decoder_input(caps: &ObjectCapsuleSet, class_idx: usize) -> Array2<f32> {
    let (b, _, _) = caps.poses.dim();
    let mut x = Array2::zeros((b, DECODER_INPUT));
    let lo = class_idx * OBJECT_DIM;
    for s in 0..b {
        x.row_mut(s)
            .slice_mut(ndarray::s![lo..lo + OBJECT_DIM])
            .assign(&caps.poses.slice(ndarray::s![s, class_idx, ..]));
    }
    x
}

/// Decoder inputs for every class hypothesis of every sample: `(batch*10, 160)`,
/// row `s*10 + j` holding capsule `j` of sample `s`.
pub fn all_class_decoder_inputs(caps: &ObjectCapsuleSet) -> Array2<f32> {
    let (b, k, d) = caps.poses.dim();
    let mut x = Array2::zeros((b * k, DECODER_INPUT));
    for s in 0..b {
        for j in 0..k {
            let lo = j * d;
            x.row_mut(s * k + j)
                .slice_mut(ndarray::s![lo..lo + d])
                .assign(&caps.poses.slice(ndarray::s![s, j, ..]));
        }
    }
    x
}

/// Reconstruction of the selected class hypothesis: all capsules except
/// `class_idx` are zeroed before decoding. Returns `(batch, 28, 28)`.
pub fn decode(
    object_caps: &ObjectCapsuleSet,
    class_idx: usize,
    params: &Decoder,
) -> Result<Array3<f32>> {
    if class_idx >= N_CLASSES {
        return Err(Error::shape(format!(
            "class_idx {class_idx} out of range (0..{N_CLASSES})"
        )));
    }
    let x = masked_decoder_input(object_caps, class_idx);
    let flat = params.forward_nograd(&x);
    let b = flat.dim().0;
    Ok(flat
        .into_shape_with_order((b, 28, 28))
        .expect("contiguous decoder output"))
}

/// Negative mean squared error between two images; 0 is a perfect match and
/// more negative is worse.
pub fn reconstruction_score(reconstruction: &Array2<f32>, target: &Array2<f32>) -> f64 {
    debug_assert_eq!(reconstruction.dim(), target.dim());
    let n = reconstruction.len() as f64;
    let sse: f64 = reconstruction
        .iter()
        .zip(target.iter())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    -sse / n
}
