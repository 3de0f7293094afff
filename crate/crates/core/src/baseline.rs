//! Plain-CNN baselines: the same convolutional backbones as the capsule
//! model, followed by fully-connected classifier heads trained with
//! cross-entropy. Single feed-forward pass, so reaction time is always 1.

use ndarray::{Array2, Array4, ArrayD, ArrayViewD, ArrayViewMutD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{EncoderKind, ModelConfig};
use crate::encoder::resnet::{BackboneCache, ResNetBackbone, ResNetGrads};
use crate::encoder::{Conv2Backbone, Conv2BackboneCache, Conv2Grads, Conv2Spec};
use crate::error::{Error, Result};
use crate::model::append_block_pairs;
use crate::nn::{ops, Adam, AdaptiveAvgPool, Linear, LinearGrad};
use crate::training::{lr_at, EarlyStopper, EpochRow, TrainLog, TrainOptions};
use crate::types::{ImageBatch, N_CLASSES};

const CONV2_HIDDEN: usize = 128;

pub enum BaselineBackbone {
    Conv2(Conv2Backbone),
    ResNet18(ResNetBackbone),
}

pub enum BaselineBackboneGrads {
    Conv2(Conv2Grads),
    ResNet18(ResNetGrads),
}

pub struct BaselineCnn {
    pub kind: EncoderKind,
    pub backbone: BaselineBackbone,
    /// Hidden dense layer (compact backbone only).
    pub head1: Option<Linear>,
    /// Final classifier layer.
    pub head2: Linear,
    gap: Option<AdaptiveAvgPool>,
}

pub struct BaselineGrads {
    pub backbone: BaselineBackboneGrads,
    pub head1: Option<LinearGrad>,
    pub head2: LinearGrad,
}

pub struct BaselineCache {
    backbone: BackboneCacheKind,
    fmap_dim: (usize, usize, usize, usize),
    flat: Array2<f32>,
    hidden: Option<Array2<f32>>,
}

enum BackboneCacheKind {
    Conv2(Conv2BackboneCache),
    ResNet18(BackboneCache),
}

impl BaselineCnn {
    pub fn new(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match config.encoder_kind {
            EncoderKind::Conv2 => {
                let backbone = Conv2Backbone::new(&mut rng, Conv2Spec::default());
                let (c, h, w) = backbone.out_shape();
                let flat = c * h * w;
                BaselineCnn {
                    kind: EncoderKind::Conv2,
                    backbone: BaselineBackbone::Conv2(backbone),
                    head1: Some(Linear::he(&mut rng, flat, CONV2_HIDDEN)),
                    head2: Linear::xavier(&mut rng, CONV2_HIDDEN, N_CLASSES),
                    gap: None,
                }
            }
            EncoderKind::ResNet18 => {
                let backbone = ResNetBackbone::new(&mut rng);
                let c = backbone.out_channels();
                BaselineCnn {
                    kind: EncoderKind::ResNet18,
                    backbone: BaselineBackbone::ResNet18(backbone),
                    head1: None,
                    head2: Linear::xavier(&mut rng, c, N_CLASSES),
                    gap: Some(AdaptiveAvgPool { out_h: 1, out_w: 1 }),
                }
            }
        }
    }

    pub fn n_params(&self) -> usize {
        let backbone = match &self.backbone {
            BaselineBackbone::Conv2(b) => b.n_params(),
            BaselineBackbone::ResNet18(b) => b.n_params(),
        };
        backbone + self.head1.as_ref().map_or(0, |l| l.n_params()) + self.head2.n_params()
    }

    fn head_forward(&self, flat: &Array2<f32>) -> (Array2<f32>, Option<Array2<f32>>) {
        match &self.head1 {
            Some(h1) => {
                let hidden = ops::relu(&h1.forward(flat));
                (self.head2.forward(&hidden), Some(hidden))
            }
            None => (self.head2.forward(flat), None),
        }
    }

    pub fn forward_train(&mut self, x: &Array4<f32>) -> (Array2<f32>, BaselineCache) {
        let (fmap, backbone_cache) = match &mut self.backbone {
            BaselineBackbone::Conv2(b) => {
                let (f, c) = b.forward(x);
                (f, BackboneCacheKind::Conv2(c))
            }
            BaselineBackbone::ResNet18(b) => {
                let (f, c) = b.forward_train(x);
                (f, BackboneCacheKind::ResNet18(c))
            }
        };
        let fmap_dim = fmap.dim();
        let pooled = match &self.gap {
            Some(gap) => gap.forward(&fmap),
            None => fmap,
        };
        let (b, c, h, w) = pooled.dim();
        let flat = pooled
            .into_shape_with_order((b, c * h * w))
            .expect("contiguous feature map");
        let (logits, hidden) = self.head_forward(&flat);
        (
            logits,
            BaselineCache {
                backbone: backbone_cache,
                fmap_dim,
                flat,
                hidden,
            },
        )
    }

    pub fn forward_eval(&self, x: &Array4<f32>) -> Array2<f32> {
        let fmap = match &self.backbone {
            BaselineBackbone::Conv2(b) => b.forward(x).0,
            BaselineBackbone::ResNet18(b) => b.forward_eval(x),
        };
        let pooled = match &self.gap {
            Some(gap) => gap.forward(&fmap),
            None => fmap,
        };
        let (b, c, h, w) = pooled.dim();
        let flat = pooled
            .into_shape_with_order((b, c * h * w))
            .expect("contiguous feature map");
        self.head_forward(&flat).0
    }

    pub fn predict(&self, x: &Array4<f32>) -> Vec<usize> {
        let logits = self.forward_eval(x);
        logits
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    pub fn backward(&self, cache: &BaselineCache, g_logits: &Array2<f32>) -> BaselineGrads {
        let (g_head1, g_head2, g_flat) = match (&self.head1, &cache.hidden) {
            (Some(h1), Some(hidden)) => {
                let (g2, g_hidden) = self.head2.backward(hidden, g_logits);
                let g_hidden = ops::relu_backward(hidden, &g_hidden);
                let (g1, g_flat) = h1.backward(&cache.flat, &g_hidden);
                (Some(g1), g2, g_flat)
            }
            _ => {
                let (g2, g_flat) = self.head2.backward(&cache.flat, g_logits);
                (None, g2, g_flat)
            }
        };
        let (bsz, c, h, w) = cache.fmap_dim;
        let g_fmap = match &self.gap {
            Some(gap) => {
                let g_pooled = g_flat
                    .into_shape_with_order((bsz, c, 1, 1))
                    .expect("contiguous");
                gap.backward(&g_pooled, (h, w))
            }
            None => g_flat
                .into_shape_with_order((bsz, c, h, w))
                .expect("contiguous"),
        };
        let backbone = match (&self.backbone, &cache.backbone) {
            (BaselineBackbone::Conv2(b), BackboneCacheKind::Conv2(bc)) => {
                BaselineBackboneGrads::Conv2(b.backward(bc, &g_fmap))
            }
            (BaselineBackbone::ResNet18(b), BackboneCacheKind::ResNet18(bc)) => {
                BaselineBackboneGrads::ResNet18(b.backward(bc, &g_fmap))
            }
            _ => unreachable!("cache kind matches backbone kind"),
        };
        BaselineGrads {
            backbone,
            head1: g_head1,
            head2: g_head2,
        }
    }

    pub fn adam_pairs<'a>(
        &'a mut self,
        grads: &'a BaselineGrads,
    ) -> Vec<(ArrayViewMutD<'a, f32>, ArrayViewD<'a, f32>)> {
        let mut pairs: Vec<(ArrayViewMutD<'a, f32>, ArrayViewD<'a, f32>)> = Vec::new();
        match (&mut self.backbone, &grads.backbone) {
            (BaselineBackbone::Conv2(b), BaselineBackboneGrads::Conv2(g)) => {
                pairs.push((b.conv1.w.view_mut().into_dyn(), g.conv1.w.view().into_dyn()));
                if let (Some(bias), Some(gb)) = (b.conv1.b.as_mut(), g.conv1.b.as_ref()) {
                    pairs.push((bias.view_mut().into_dyn(), gb.view().into_dyn()));
                }
                pairs.push((b.conv2.w.view_mut().into_dyn(), g.conv2.w.view().into_dyn()));
                if let (Some(bias), Some(gb)) = (b.conv2.b.as_mut(), g.conv2.b.as_ref()) {
                    pairs.push((bias.view_mut().into_dyn(), gb.view().into_dyn()));
                }
            }
            (BaselineBackbone::ResNet18(b), BaselineBackboneGrads::ResNet18(g)) => {
                pairs.push((b.stem.w.view_mut().into_dyn(), g.stem.w.view().into_dyn()));
                pairs.push((
                    b.stem_bn.gamma.view_mut().into_dyn(),
                    g.stem_bn.gamma.view().into_dyn(),
                ));
                pairs.push((
                    b.stem_bn.beta.view_mut().into_dyn(),
                    g.stem_bn.beta.view().into_dyn(),
                ));
                for (block, bg) in b.blocks.iter_mut().zip(g.blocks.iter()) {
                    append_block_pairs(block, bg, &mut pairs);
                }
            }
            _ => unreachable!("gradient kind matches backbone kind"),
        }
        if let (Some(h1), Some(g1)) = (self.head1.as_mut(), grads.head1.as_ref()) {
            pairs.push((h1.w.view_mut().into_dyn(), g1.w.view().into_dyn()));
            pairs.push((h1.b.view_mut().into_dyn(), g1.b.view().into_dyn()));
        }
        pairs.push((
            self.head2.w.view_mut().into_dyn(),
            grads.head2.w.view().into_dyn(),
        ));
        pairs.push((
            self.head2.b.view_mut().into_dyn(),
            grads.head2.b.view().into_dyn(),
        ));
        pairs
    }

    pub fn named_tensors(&self) -> Vec<(String, ArrayD<f32>)> {
        let mut out = Vec::new();
        match &self.backbone {
            BaselineBackbone::Conv2(b) => {
                crate::model::push_conv("backbone.conv1", &b.conv1, &mut out);
                crate::model::push_conv("backbone.conv2", &b.conv2, &mut out);
            }
            BaselineBackbone::ResNet18(b) => {
                crate::model::push_conv("backbone.stem", &b.stem, &mut out);
                crate::model::push_bn("backbone.stem_bn", &b.stem_bn, &mut out);
                for (i, blk) in b.blocks.iter().enumerate() {
                    let p = format!("backbone.block{i}");
                    crate::model::push_conv(&format!("{p}.conv1"), &blk.conv1, &mut out);
                    crate::model::push_bn(&format!("{p}.bn1"), &blk.bn1, &mut out);
                    crate::model::push_conv(&format!("{p}.conv2"), &blk.conv2, &mut out);
                    crate::model::push_bn(&format!("{p}.bn2"), &blk.bn2, &mut out);
                    if let Some((c, bn)) = &blk.down {
                        crate::model::push_conv(&format!("{p}.down.conv"), c, &mut out);
                        crate::model::push_bn(&format!("{p}.down.bn"), bn, &mut out);
                    }
                }
            }
        }
        if let Some(h1) = &self.head1 {
            crate::model::push_linear("head.fc1", h1, &mut out);
        }
        crate::model::push_linear("head.fc2", &self.head2, &mut out);
        out
    }

    pub fn load_named(&mut self, tensors: &[(String, ArrayD<f32>)]) -> Result<()> {
        let expected = self.named_tensors();
        let by_name: std::collections::BTreeMap<&str, &ArrayD<f32>> = tensors
            .iter()
            .map(|(name, arr)| (name.as_str(), arr))
            .collect();
        for (name, current) in &expected {
            let found = by_name.get(name.as_str()).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint is missing tensor '{name}'"))
            })?;
            if found.shape() != current.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    found.shape(),
                    current.shape()
                )));
            }
        }
        if tensors.len() != expected.len() {
            return Err(Error::Checkpoint(
                "checkpoint contains unexpected tensors".to_string(),
            ));
        }
        let take = |name: &str| -> ArrayD<f32> { (*by_name.get(name).unwrap()).clone() };
        match &mut self.backbone {
            BaselineBackbone::Conv2(b) => {
                crate::model::load_conv("backbone.conv1", &mut b.conv1, &take);
                crate::model::load_conv("backbone.conv2", &mut b.conv2, &take);
            }
            BaselineBackbone::ResNet18(b) => {
                crate::model::load_conv("backbone.stem", &mut b.stem, &take);
                crate::model::load_bn("backbone.stem_bn", &mut b.stem_bn, &take);
                for (i, blk) in b.blocks.iter_mut().enumerate() {
                    let p = format!("backbone.block{i}");
                    crate::model::load_conv(&format!("{p}.conv1"), &mut blk.conv1, &take);
                    crate::model::load_bn(&format!("{p}.bn1"), &mut blk.bn1, &take);
                    crate::model::load_conv(&format!("{p}.conv2"), &mut blk.conv2, &take);
                    crate::model::load_bn(&format!("{p}.bn2"), &mut blk.bn2, &take);
                    if let Some((c, bn)) = blk.down.as_mut() {
                        crate::model::load_conv(&format!("{p}.down.conv"), c, &take);
                        crate::model::load_bn(&format!("{p}.down.bn"), bn, &take);
                    }
                }
            }
        }
        if let Some(h1) = self.head1.as_mut() {
            crate::model::load_linear("head.fc1", h1, &take);
        }
        crate::model::load_linear("head.fc2", &mut self.head2, &take);
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        crate::checkpoint::save(path, &self.named_tensors())
    }

    pub fn load_checkpoint(&mut self, path: &std::path::Path) -> Result<()> {
        let tensors = crate::checkpoint::load(path)?;
        self.load_named(&tensors)
    }
}

/// Batch-mean cross-entropy over softmax logits plus its gradient.
pub fn cross_entropy_batch(logits: &Array2<f32>, labels: &[u8]) -> (f64, Array2<f32>) {
    let b = logits.dim().0;
    debug_assert_eq!(b, labels.len());
    let mut grad = Array2::<f32>::zeros(logits.raw_dim());
    let mut loss = 0.0f64;
    for (sidx, &label) in labels.iter().enumerate() {
        let p = ops::softmax(logits.row(sidx));
        loss -= p[label as usize].max(1e-300).ln();
        for k in 0..N_CLASSES {
            let target = if k == label as usize { 1.0 } else { 0.0 };
            grad[[sidx, k]] = ((p[k] - target) / b as f64) as f32;
        }
    }
    (loss / b as f64, grad)
}

fn gather_nchw(images: &ImageBatch, idxs: &[usize]) -> Array4<f32> {
    let mut nchw = Array4::zeros((idxs.len(), 1, 28, 28));
    for (row, &idx) in idxs.iter().enumerate() {
        nchw.slice_mut(ndarray::s![row, 0, .., ..])
            .assign(&images.data().index_axis(ndarray::Axis(0), idx));
    }
    nchw
}

fn baseline_accuracy(
    model: &BaselineCnn,
    images: &ImageBatch,
    labels: &[u8],
    batch: usize,
) -> f64 {
    let n = images.len();
    if n == 0 {
        return 0.0;
    }
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + batch).min(n);
        let idxs: Vec<usize> = (start..end).collect();
        let preds = model.predict(&gather_nchw(images, &idxs));
        correct += preds
            .iter()
            .zip(&idxs)
            .filter(|(p, &i)| **p == labels[i] as usize)
            .count();
        start = end;
    }
    correct as f64 / n as f64
}

/// Trains a baseline CNN with the same schedule as the capsule model
/// (Adam, exponential decay, early stopping on validation accuracy).
pub fn train_baseline(
    images: &ImageBatch,
    labels: &[u8],
    config: &ModelConfig,
    seed: u64,
    opts: &TrainOptions,
) -> Result<(BaselineCnn, TrainLog)> {
    let n = images.len();
    if n == 0 {
        return Err(Error::Training("empty training dataset".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let val_n = ((n as f64 * config.validation_fraction).round() as usize).clamp(1, n - 1);
    let (val_idx, train_idx) = order.split_at(val_n);
    let val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    let val_images = ImageBatch::from_raw(images.data().select(ndarray::Axis(0), &val_idx));
    let val_labels: Vec<u8> = val_idx.iter().map(|&i| labels[i]).collect();

    let mut model = BaselineCnn::new(config, seed);
    let mut adam = Adam::new();
    let mut stopper = EarlyStopper::new(config.patience);
    let mut log = TrainLog::default();
    let mut best_tensors = model.named_tensors();

    for epoch in 0..opts.max_epochs {
        let lr = lr_at(config.initial_lr, config.lr_decay, epoch);
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for (batch_no, chunk) in train_idx.chunks(config.batch_size).enumerate() {
            let nchw = gather_nchw(images, chunk);
            let batch_labels: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
            let (logits, cache) = model.forward_train(&nchw);
            let (loss, g_logits) = cross_entropy_batch(&logits, &batch_labels);
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {loss} at epoch {epoch}, batch {batch_no} (lr {lr}); \
                     if this persists, drop initial_lr to 0.001"
                )));
            }
            let grads = model.backward(&cache, &g_logits);
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
            adam.step(model.adam_pairs(&grads), lr);
        }
        let train_loss = loss_sum / seen as f64;
        let val_accuracy = baseline_accuracy(&model, &val_images, &val_labels, config.batch_size);
        log.rows.push(EpochRow {
            epoch,
            lr,
            train_loss,
            val_accuracy,
        });
        if opts.verbose {
            eprintln!(
                "baseline epoch {epoch:3}  lr {lr:.6}  train_loss {train_loss:.6}  val_acc {val_accuracy:.4}"
            );
        }
        let (new_best, stop) = stopper.observe(epoch, val_accuracy);
        if new_best {
            best_tensors = model.named_tensors();
        }
        if stop {
            break;
        }
    }
    model.load_named(&best_tensors)?;
    log.best_epoch = stopper.best_epoch;
    log.best_val_accuracy = stopper.best_accuracy;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn conv2_baseline_parameter_count() {
        let model = BaselineCnn::new(&ModelConfig::default(), 0);
        // conv stack 18,816 + fc1 (9216*128 + 128) + fc2 (128*10 + 10)
        assert_eq!(model.n_params(), 18_816 + 1_179_776 + 1_290);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Array2::<f32>::zeros((2, 10));
        let (loss, grad) = cross_entropy_batch(&logits, &[3, 5]);
        assert_abs_diff_eq!(loss, (10.0f64).ln(), epsilon = 1e-9);
        // gradient rows sum to zero
        for row in grad.rows() {
            assert!(row.sum().abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits: Array2<f32> = crate::nn::init::normal(&mut rng, (2, 10), 1.0);
        let labels = [2u8, 9];
        let (_, grad) = cross_entropy_batch(&logits, &labels);
        let h = 1e-3f32;
        for idx in [(0usize, 2usize), (0, 5), (1, 9), (1, 1)] {
            let mut lp = logits.clone();
            lp[idx] += h;
            let up = cross_entropy_batch(&lp, &labels).0;
            lp[idx] -= 2.0 * h;
            let dn = cross_entropy_batch(&lp, &labels).0;
            let fd = (up - dn) / (2.0 * h as f64);
            assert!(
                (fd - grad[idx] as f64).abs() < 1e-4,
                "{idx:?}: fd {fd} vs {}",
                grad[idx]
            );
        }
    }

    #[test]
    fn baseline_head_gradient_matches_finite_differences() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = BaselineCnn::new(&ModelConfig::default(), 1);
        let x: Array4<f32> =
            crate::nn::init::normal(&mut rng, (2, 1, 28, 28), 0.4).mapv(|v: f32| v.clamp(0.0, 1.0));
        let labels = [4u8, 0];
        let (logits, cache) = model.forward_train(&x);
        let (_, g_logits) = cross_entropy_batch(&logits, &labels);
        let grads = model.backward(&cache, &g_logits);
        let h = 1e-2f32;
        let head_grad = grads.head1.as_ref().unwrap();
        for idx in [(100usize, 3usize), (5_000, 60)] {
            let h1 = model.head1.as_mut().unwrap();
            let orig = h1.w[idx];
            h1.w[idx] = orig + h;
            let up = cross_entropy_batch(&model.forward_eval(&x), &labels).0;
            model.head1.as_mut().unwrap().w[idx] = orig - h;
            let dn = cross_entropy_batch(&model.forward_eval(&x), &labels).0;
            model.head1.as_mut().unwrap().w[idx] = orig;
            let fd = (up - dn) / (2.0 * h as f64);
            let an = head_grad.w[idx] as f64;
            assert!(
                (fd - an).abs() < 5e-2 * fd.abs().max(an.abs()).max(0.01),
                "head1.w{idx:?}: fd {fd} vs {an}"
            );
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("baseline.ckpt");
        let model = BaselineCnn::new(&ModelConfig::default(), 5);
        model.save_checkpoint(&path).unwrap();
        let mut other = BaselineCnn::new(&ModelConfig::default(), 6);
        other.load_checkpoint(&path).unwrap();
        assert_eq!(model.head2.w, other.head2.w);
        match (&model.backbone, &other.backbone) {
            (BaselineBackbone::Conv2(a), BaselineBackbone::Conv2(b)) => {
                assert_eq!(a.conv1.w, b.conv1.w);
            }
            _ => panic!("unexpected backbone"),
        }
    }
}
