//! Residual backbone: the standard 18-layer topology (eight basic blocks in
//! four stages) at half width, adapted to 1-channel 28x28 input.
//!
//! Adaptation choices: 3x3 stride-1 stem with no initial max-pool (28x28 is
//! too small to discard resolution up front), stage widths 32/64/128/256,
//! and an adaptive average pool onto a 3x3 grid. The 256x3x3 output regroups
//! into 288 feature capsules of 8 channels.

use ndarray::{Array3, Array4};
use rand::Rng;

use super::{capsules_backward, to_capsules};
use crate::binding::{squash_field, squash_field_backward};
use crate::nn::batchnorm::BnCache;
use crate::nn::{ops, AdaptiveAvgPool, BatchNorm2d, BatchNorm2dGrad, Conv2d, Conv2dGrad};
use crate::types::{FeatureCapsuleField, FEATURE_DIM};

const STAGE_WIDTHS: [usize; 4] = [32, 64, 128, 256];
const POOL_OUT: usize = 3;

#[derive(Debug, Clone)]
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub down: Option<(Conv2d, BatchNorm2d)>,
}

#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub conv1: Conv2dGrad,
    pub bn1: BatchNorm2dGrad,
    pub conv2: Conv2dGrad,
    pub bn2: BatchNorm2dGrad,
    pub down: Option<(Conv2dGrad, BatchNorm2dGrad)>,
}

pub struct BlockCache {
    x: Array4<f32>,
    h1: Array4<f32>,
    bn1c: BnCache,
    bn2c: BnCache,
    downc: Option<BnCache>,
    y: Array4<f32>,
}

impl BasicBlock {
    fn new<R: Rng>(rng: &mut R, c_in: usize, c_out: usize, stride: usize) -> Self {
        let down = (stride != 1 || c_in != c_out).then(|| {
            (
                Conv2d::he(rng, c_in, c_out, 1, stride, 0, false),
                BatchNorm2d::new(c_out),
            )
        });
        BasicBlock {
            conv1: Conv2d::he(rng, c_in, c_out, 3, stride, 1, false),
            bn1: BatchNorm2d::new(c_out),
            conv2: Conv2d::he(rng, c_out, c_out, 3, 1, 1, false),
            bn2: BatchNorm2d::new(c_out),
            down,
        }
    }

    fn n_params(&self) -> usize {
        self.conv1.n_params()
            + self.bn1.n_params()
            + self.conv2.n_params()
            + self.bn2.n_params()
            + self
                .down
                .as_ref()
                .map_or(0, |(c, bn)| c.n_params() + bn.n_params())
    }

    fn forward_train(&mut self, x: &Array4<f32>) -> (Array4<f32>, BlockCache) {
        let p1 = self.conv1.forward(x);
        let (n1, bn1c) = self.bn1.forward_train(&p1);
        let h1 = ops::relu(&n1);
        let p2 = self.conv2.forward(&h1);
        let (n2, bn2c) = self.bn2.forward_train(&p2);
        let (shortcut, downc) = match self.down.as_mut() {
            Some((conv, bn)) => {
                let pd = conv.forward(x);
                let (nd, dc) = bn.forward_train(&pd);
                (nd, Some(dc))
            }
            None => (x.clone(), None),
        };
        let y = ops::relu(&(n2 + &shortcut));
        (
            y.clone(),
            BlockCache {
                x: x.clone(),
                h1,
                bn1c,
                bn2c,
                downc,
                y,
            },
        )
    }

    fn forward_eval(&self, x: &Array4<f32>) -> Array4<f32> {
        let h1 = ops::relu(&self.bn1.forward_eval(&self.conv1.forward(x)));
        let n2 = self.bn2.forward_eval(&self.conv2.forward(&h1));
        let shortcut = match self.down.as_ref() {
            Some((conv, bn)) => bn.forward_eval(&conv.forward(x)),
            None => x.clone(),
        };
        ops::relu(&(n2 + &shortcut))
    }

    fn backward(
        &self,
        cache: &BlockCache,
        gy: &Array4<f32>,
        need_gx: bool,
    ) -> (BlockGrads, Option<Array4<f32>>) {
        let gz = ops::relu_backward(&cache.y, gy);
        let (g_bn2, gp2) = self.bn2.backward(&cache.bn2c, &gz);
        let (g_conv2, gh1) = self.conv2.backward(&cache.h1, &gp2, true);
        let gh1 = ops::relu_backward(&cache.h1, &gh1.expect("conv2 input grad"));
        let (g_bn1, gp1) = self.bn1.backward(&cache.bn1c, &gh1);
        let (g_conv1, gx_main) = self.conv1.backward(&cache.x, &gp1, need_gx);
        let (g_down, gx_short) = match (self.down.as_ref(), cache.downc.as_ref()) {
            (Some((conv, bn)), Some(dc)) => {
                let (g_bnd, gpd) = bn.backward(dc, &gz);
                let (g_convd, gxs) = conv.backward(&cache.x, &gpd, need_gx);
                (Some((g_convd, g_bnd)), gxs)
            }
            _ => (None, need_gx.then(|| gz.clone())),
        };
        let gx = match (gx_main, gx_short) {
            (Some(a), Some(b)) => Some(a + &b),
            _ => None,
        };
        (
            BlockGrads {
                conv1: g_conv1,
                bn1: g_bn1,
                conv2: g_conv2,
                bn2: g_bn2,
                down: g_down,
            },
            gx,
        )
    }
}

/// Stem + eight basic blocks, ending at a `(b, 256, h, w)` feature volume.
/// Shared by the capsule encoder and the plain-CNN baseline.
#[derive(Debug, Clone)]
pub struct ResNetBackbone {
    pub stem: Conv2d,
    pub stem_bn: BatchNorm2d,
    pub blocks: Vec<BasicBlock>,
}

#[derive(Debug, Clone)]
pub struct ResNetGrads {
    pub stem: Conv2dGrad,
    pub stem_bn: BatchNorm2dGrad,
    pub blocks: Vec<BlockGrads>,
}

pub struct BackboneCache {
    x: Array4<f32>,
    stem_bnc: BnCache,
    stem_out: Array4<f32>,
    block_caches: Vec<BlockCache>,
}

impl ResNetBackbone {
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        let stem = Conv2d::he(rng, 1, STAGE_WIDTHS[0], 3, 1, 1, false);
        let stem_bn = BatchNorm2d::new(STAGE_WIDTHS[0]);
        let mut blocks = Vec::with_capacity(8);
        let mut c_in = STAGE_WIDTHS[0];
        for (stage, &width) in STAGE_WIDTHS.iter().enumerate() {
            let stride = if stage == 0 { 1 } else { 2 };
            blocks.push(BasicBlock::new(rng, c_in, width, stride));
            blocks.push(BasicBlock::new(rng, width, width, 1));
            c_in = width;
        }
        ResNetBackbone {
            stem,
            stem_bn,
            blocks,
        }
    }

    pub fn out_channels(&self) -> usize {
        STAGE_WIDTHS[3]
    }

    pub fn n_params(&self) -> usize {
        self.stem.n_params()
            + self.stem_bn.n_params()
            + self.blocks.iter().map(|b| b.n_params()).sum::<usize>()
    }

    pub fn forward_train(&mut self, x: &Array4<f32>) -> (Array4<f32>, BackboneCache) {
        let p = self.stem.forward(x);
        let (n, stem_bnc) = self.stem_bn.forward_train(&p);
        let stem_out = ops::relu(&n);
        let mut h = stem_out.clone();
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in self.blocks.iter_mut() {
            let (next, cache) = block.forward_train(&h);
            block_caches.push(cache);
            h = next;
        }
        (
            h,
            BackboneCache {
                x: x.clone(),
                stem_bnc,
                stem_out,
                block_caches,
            },
        )
    }

    pub fn forward_eval(&self, x: &Array4<f32>) -> Array4<f32> {
        let mut h = ops::relu(&self.stem_bn.forward_eval(&self.stem.forward(x)));
        for block in &self.blocks {
            h = block.forward_eval(&h);
        }
        h
    }

    pub fn backward(&self, cache: &BackboneCache, g_fmap: &Array4<f32>) -> ResNetGrads {
        let mut g = g_fmap.clone();
        let mut block_grads: Vec<BlockGrads> = Vec::with_capacity(self.blocks.len());
        for (block, bcache) in self.blocks.iter().zip(cache.block_caches.iter()).rev() {
            let (bg, gx) = block.backward(bcache, &g, true);
            block_grads.push(bg);
            g = gx.expect("block input grad");
        }
        block_grads.reverse();
        let g = ops::relu_backward(&cache.stem_out, &g);
        let (g_stem_bn, gp) = self.stem_bn.backward(&cache.stem_bnc, &g);
        let (g_stem, _) = self.stem.backward(&cache.x, &gp, false);
        ResNetGrads {
            stem: g_stem,
            stem_bn: g_stem_bn,
            blocks: block_grads,
        }
    }
}

/// Residual backbone with the adaptive-pool + capsule head.
#[derive(Debug, Clone)]
pub struct ResNetEncoder {
    pub backbone: ResNetBackbone,
    pool: AdaptiveAvgPool,
}

pub struct ResNetCache {
    backbone: BackboneCache,
    pre_pool: Array4<f32>,
    pre_squash: Array3<f32>,
}

impl ResNetEncoder {
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        ResNetEncoder {
            backbone: ResNetBackbone::new(rng),
            pool: AdaptiveAvgPool {
                out_h: POOL_OUT,
                out_w: POOL_OUT,
            },
        }
    }

    pub fn n_feature_caps(&self) -> usize {
        STAGE_WIDTHS[3] / FEATURE_DIM * POOL_OUT * POOL_OUT
    }

    pub fn n_params(&self) -> usize {
        self.backbone.n_params()
    }

    pub fn forward_train(&mut self, x: &Array4<f32>) -> (FeatureCapsuleField, ResNetCache) {
        let (pre_pool, backbone) = self.backbone.forward_train(x);
        let pooled = self.pool.forward(&pre_pool);
        let pre_squash = to_capsules(&pooled);
        let poses = squash_field(&pre_squash);
        (
            FeatureCapsuleField { poses },
            ResNetCache {
                backbone,
                pre_pool,
                pre_squash,
            },
        )
    }

    pub fn forward_eval(&self, x: &Array4<f32>) -> FeatureCapsuleField {
        let h = self.backbone.forward_eval(x);
        let pooled = self.pool.forward(&h);
        FeatureCapsuleField {
            poses: squash_field(&to_capsules(&pooled)),
        }
    }

    pub fn backward(&self, cache: &ResNetCache, g_poses: &Array3<f32>) -> ResNetGrads {
        let g_pre = squash_field_backward(&cache.pre_squash, g_poses);
        let (_, _, ph, pw) = cache.pre_pool.dim();
        let g_pooled = capsules_backward(&g_pre, STAGE_WIDTHS[3], POOL_OUT, POOL_OUT);
        let g_fmap = self.pool.backward(&g_pooled, (ph, pw));
        self.backbone.backward(&cache.backbone, &g_fmap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn produces_288_capsules() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut enc = ResNetEncoder::new(&mut rng);
        assert_eq!(enc.n_feature_caps(), 288);
        let x: Array4<f32> =
            crate::nn::init::normal(&mut rng, (2, 1, 28, 28), 0.4).mapv(|v| v.clamp(0.0, 1.0));
        let (field, _) = enc.forward_train(&x);
        assert_eq!(field.poses.dim(), (2, 288, 8));
        let eval_field = enc.forward_eval(&x);
        assert_eq!(eval_field.poses.dim(), (2, 288, 8));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = ResNetEncoder::new(&mut rng);
        let x: Array4<f32> =
            crate::nn::init::normal(&mut rng, (1, 1, 28, 28), 0.4).mapv(|v| v.clamp(0.0, 1.0));
        let a = enc.forward_eval(&x);
        let b = enc.forward_eval(&x);
        assert_eq!(a.poses, b.poses);
    }

    #[test]
    fn train_gradient_matches_directional_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut enc = ResNetEncoder::new(&mut rng);
        let x: Array4<f32> =
            crate::nn::init::normal(&mut rng, (2, 1, 28, 28), 0.4).mapv(|v| v.clamp(0.0, 1.0));
        let weights: Array3<f32> = crate::nn::init::normal(&mut rng, (2, 288, 8), 1.0);
        // weighted-sum loss; batch statistics make this a function of the
        // whole batch, which forward_train recomputes identically each call
        let loss = |e: &mut ResNetEncoder| -> f64 {
            let (f, _) = e.forward_train(&x);
            f.poses
                .iter()
                .zip(weights.iter())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum()
        };
        let (_, cache) = enc.forward_train(&x);
        let grads = enc.backward(&cache, &weights);
        // the loss surface is kink-dense (ReLU at batch-norm scale), so the
        // step must be small before FD converges to the analytic slope
        let h = 3e-4f32;
        // stem kernel coordinates
        for idx in [(0usize, 0usize), (13, 5)] {
            let orig = enc.backbone.stem.w[idx];
            enc.backbone.stem.w[idx] = orig + h;
            let up = loss(&mut enc.clone());
            enc.backbone.stem.w[idx] = orig - h;
            let dn = loss(&mut enc.clone());
            enc.backbone.stem.w[idx] = orig;
            let fd = (up - dn) / (2.0 * h as f64);
            let an = grads.stem.w[idx] as f64;
            assert!(
                (fd - an).abs() < 1e-1 * fd.abs().max(an.abs()).max(0.05),
                "stem.w{idx:?}: fd {fd} vs {an}"
            );
        }
        // a deep-block kernel coordinate
        let idx = (3usize, 40usize);
        let orig = enc.backbone.blocks[6].conv1.w[idx];
        enc.backbone.blocks[6].conv1.w[idx] = orig + h;
        let up = loss(&mut enc.clone());
        enc.backbone.blocks[6].conv1.w[idx] = orig - h;
        let dn = loss(&mut enc.clone());
        enc.backbone.blocks[6].conv1.w[idx] = orig;
        let fd = (up - dn) / (2.0 * h as f64);
        let an = grads.blocks[6].conv1.w[idx] as f64;
        assert!(
            (fd - an).abs() < 1e-1 * fd.abs().max(an.abs()).max(0.05),
            "block6.conv1.w{idx:?}: fd {fd} vs {an}"
        );
    }
}
