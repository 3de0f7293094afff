//! Convolutional backbones mapping images to feature-capsule fields.
//!
//! The compact backbone is two 3x3 convolutions (32, 64 channels, stride 1,
//! ReLU) followed by a 2x2 max-pool: 28x28 -> 26 -> 24 -> 12, i.e. a
//! 64x12x12 feature volume regrouped into 1152 capsules of 8 channels. The
//! residual backbone lives in [`resnet`] and produces 288 capsules. Capsule
//! vectors are squashed before routing. The bare backbones are shared with
//! the plain-CNN baseline, which attaches a fully-connected head instead of
//! the capsule regrouping.

use ndarray::{Array3, Array4};
use rand::Rng;

use crate::binding::{squash_field, squash_field_backward};
use crate::error::{Error, Result};
use crate::nn::{ops, Conv2d, Conv2dGrad, MaxPool2};
use crate::types::{FeatureCapsuleField, ImageBatch, FEATURE_DIM, IMAGE_SIDE};

pub mod resnet;

pub use resnet::{ResNetBackbone, ResNetEncoder, ResNetGrads};

/// Regroups a `(b, C, h, w)` feature volume into `(b, C/8 * h * w, 8)`
/// capsules: eight consecutive channels at one spatial position form a pose.
pub fn to_capsules(fmap: &Array4<f32>) -> Array3<f32> {
    let (b, c, h, w) = fmap.dim();
    debug_assert_eq!(c % FEATURE_DIM, 0, "channels must split into 8-d poses");
    let groups = c / FEATURE_DIM;
    let v = fmap
        .view()
        .into_shape_with_order((b, groups, FEATURE_DIM, h, w))
        .expect("contiguous feature map");
    v.permuted_axes([0, 1, 3, 4, 2])
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((b, groups * h * w, FEATURE_DIM))
        .expect("same size")
}

/// Inverse of [`to_capsules`] for gradients.
pub fn capsules_backward(g: &Array3<f32>, c: usize, h: usize, w: usize) -> Array4<f32> {
    let (b, _, _) = g.dim();
    let groups = c / FEATURE_DIM;
    let v = g
        .view()
        .into_shape_with_order((b, groups, h, w, FEATURE_DIM))
        .expect("contiguous capsule grad");
    v.permuted_axes([0, 1, 4, 2, 3])
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((b, c, h, w))
        .expect("same size")
}

/// Geometry of the two-convolution backbone. The production preset yields
/// 1152 capsules; tests shrink it to a few capsules for gradient checks.
#[derive(Debug, Clone, Copy)]
pub struct Conv2Spec {
    pub c1: usize,
    pub c2: usize,
    pub k1: usize,
    pub k2: usize,
    pub s1: usize,
    pub s2: usize,
    pub pool: bool,
}

impl Default for Conv2Spec {
    fn default() -> Self {
        Conv2Spec {
            c1: 32,
            c2: 64,
            k1: 3,
            k2: 3,
            s1: 1,
            s2: 1,
            pool: true,
        }
    }
}

/// conv -> ReLU -> conv -> ReLU -> optional 2x2 max-pool.
#[derive(Debug, Clone)]
pub struct Conv2Backbone {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub pool: bool,
    out_shape: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct Conv2Grads {
    pub conv1: Conv2dGrad,
    pub conv2: Conv2dGrad,
}

pub struct Conv2BackboneCache {
    x: Array4<f32>,
    y1: Array4<f32>,
    y2: Array4<f32>,
    pool_arg: Option<Array4<u8>>,
}

impl Conv2Backbone {
    pub fn new<R: Rng>(rng: &mut R, spec: Conv2Spec) -> Self {
        let conv1 = Conv2d::he(rng, 1, spec.c1, spec.k1, spec.s1, 0, true);
        let conv2 = Conv2d::he(rng, spec.c1, spec.c2, spec.k2, spec.s2, 0, true);
        let (h1, w1) = conv1.out_hw(IMAGE_SIDE, IMAGE_SIDE);
        let (mut h2, mut w2) = conv2.out_hw(h1, w1);
        if spec.pool {
            h2 /= 2;
            w2 /= 2;
        }
        Conv2Backbone {
            conv1,
            conv2,
            pool: spec.pool,
            out_shape: (spec.c2, h2, w2),
        }
    }

    /// Final feature-map geometry (channels, h, w).
    pub fn out_shape(&self) -> (usize, usize, usize) {
        self.out_shape
    }

    pub fn n_params(&self) -> usize {
        self.conv1.n_params() + self.conv2.n_params()
    }

    pub fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, Conv2BackboneCache) {
        let y1 = ops::relu(&self.conv1.forward(x));
        let y2 = ops::relu(&self.conv2.forward(&y1));
        let (fmap, pool_arg) = if self.pool {
            let (pooled, arg) = MaxPool2.forward(&y2);
            (pooled, Some(arg))
        } else {
            (y2.clone(), None)
        };
        (
            fmap,
            Conv2BackboneCache {
                x: x.clone(),
                y1,
                y2,
                pool_arg,
            },
        )
    }

    pub fn backward(&self, cache: &Conv2BackboneCache, g_fmap: &Array4<f32>) -> Conv2Grads {
        let g_y2 = match &cache.pool_arg {
            Some(arg) => {
                let (_, _, fh, fw) = cache.y2.dim();
                MaxPool2.backward(arg, g_fmap, (fh, fw))
            }
            None => g_fmap.clone(),
        };
        let g_y2 = ops::relu_backward(&cache.y2, &g_y2);
        let (g_conv2, g_y1) = self.conv2.backward(&cache.y1, &g_y2, true);
        let g_y1 = ops::relu_backward(&cache.y1, &g_y1.expect("conv2 input grad"));
        let (g_conv1, _) = self.conv1.backward(&cache.x, &g_y1, false);
        Conv2Grads {
            conv1: g_conv1,
            conv2: g_conv2,
        }
    }
}

/// Two-convolution backbone with the capsule regrouping + squash head.
#[derive(Debug, Clone)]
pub struct Conv2Encoder {
    pub backbone: Conv2Backbone,
}

pub struct Conv2Cache {
    backbone: Conv2BackboneCache,
    pre_squash: Array3<f32>,
}

impl Conv2Encoder {
    pub fn new<R: Rng>(rng: &mut R, spec: Conv2Spec) -> Self {
        let backbone = Conv2Backbone::new(rng, spec);
        assert_eq!(
            backbone.out_shape().0 % FEATURE_DIM,
            0,
            "channel count must split into 8-d poses"
        );
        Conv2Encoder { backbone }
    }

    pub fn standard<R: Rng>(rng: &mut R) -> Self {
        Self::new(rng, Conv2Spec::default())
    }

    pub fn n_feature_caps(&self) -> usize {
        let (c, h, w) = self.backbone.out_shape();
        c / FEATURE_DIM * h * w
    }

    pub fn n_params(&self) -> usize {
        self.backbone.n_params()
    }

    pub fn forward(&self, x: &Array4<f32>) -> (FeatureCapsuleField, Conv2Cache) {
        let (fmap, backbone) = self.backbone.forward(x);
        let pre_squash = to_capsules(&fmap);
        let poses = squash_field(&pre_squash);
        (
            FeatureCapsuleField { poses },
            Conv2Cache {
                backbone,
                pre_squash,
            },
        )
    }

    pub fn backward(&self, cache: &Conv2Cache, g_poses: &Array3<f32>) -> Conv2Grads {
        let (c, h, w) = self.backbone.out_shape();
        let g_pre = squash_field_backward(&cache.pre_squash, g_poses);
        let g_fmap = capsules_backward(&g_pre, c, h, w);
        self.backbone.backward(&cache.backbone, &g_fmap)
    }
}

/// Either convolutional backbone, behind one interface.
#[derive(Debug, Clone)]
pub enum Encoder {
    Conv2(Conv2Encoder),
    ResNet18(ResNetEncoder),
}

pub enum EncoderCache {
    Conv2(Conv2Cache),
    ResNet18(resnet::ResNetCache),
}

#[derive(Debug)]
pub enum EncoderGrads {
    Conv2(Conv2Grads),
    ResNet18(ResNetGrads),
}

impl Encoder {
    pub fn n_feature_caps(&self) -> usize {
        match self {
            Encoder::Conv2(e) => e.n_feature_caps(),
            Encoder::ResNet18(e) => e.n_feature_caps(),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Encoder::Conv2(e) => e.n_params(),
            Encoder::ResNet18(e) => e.n_params(),
        }
    }

    /// Training-mode forward (batch statistics for any normalization layers).
    pub fn forward_train(&mut self, x: &Array4<f32>) -> (FeatureCapsuleField, EncoderCache) {
        match self {
            Encoder::Conv2(e) => {
                let (f, c) = e.forward(x);
                (f, EncoderCache::Conv2(c))
            }
            Encoder::ResNet18(e) => {
                let (f, c) = e.forward_train(x);
                (f, EncoderCache::ResNet18(c))
            }
        }
    }

    /// Inference-mode forward; pure, shareable across threads.
    pub fn forward_eval(&self, x: &Array4<f32>) -> FeatureCapsuleField {
        match self {
            Encoder::Conv2(e) => e.forward(x).0,
            Encoder::ResNet18(e) => e.forward_eval(x),
        }
    }

    pub fn backward(&self, cache: &EncoderCache, g_poses: &Array3<f32>) -> EncoderGrads {
        match (self, cache) {
            (Encoder::Conv2(e), EncoderCache::Conv2(c)) => {
                EncoderGrads::Conv2(e.backward(c, g_poses))
            }
            (Encoder::ResNet18(e), EncoderCache::ResNet18(c)) => {
                EncoderGrads::ResNet18(e.backward(c, g_poses))
            }
            _ => unreachable!("cache kind matches encoder kind"),
        }
    }
}

/// Converts a `(b, 28, 28)` batch into the `(b, 1, 28, 28)` layout the
/// convolutions expect.
pub fn batch_to_nchw(images: &ImageBatch) -> Array4<f32> {
    let (b, h, w) = images.data().dim();
    images
        .data()
        .clone()
        .into_shape_with_order((b, 1, h, w))
        .expect("contiguous image batch")
}

/// Encoder forward over a validated image batch (inference mode).
pub fn encode(image: &ImageBatch, params: &Encoder) -> Result<FeatureCapsuleField> {
    let (_, h, w) = image.data().dim();
    if h != IMAGE_SIDE || w != IMAGE_SIDE {
        return Err(Error::shape(format!(
            "encoder expects {IMAGE_SIDE}x{IMAGE_SIDE} input, got {h}x{w}"
        )));
    }
    Ok(params.forward_eval(&batch_to_nchw(image)))
}
