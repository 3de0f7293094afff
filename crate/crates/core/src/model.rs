//! The full capsule classifier: encoder, vote weights and decoder, plus the
//! named-parameter registry used by the optimizer and checkpoints.

use ndarray::{Array2, Array3, ArrayD, ArrayViewD, ArrayViewMutD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{EncoderKind, ModelConfig};
use crate::decoder::{Decoder, DecoderGrad};
use crate::encoder::{
    resnet::{BlockGrads, ResNetEncoder},
    Conv2Encoder, Encoder, EncoderGrads,
};
use crate::error::{Error, Result};
use crate::nn::{init, Linear};
use crate::types::{ObjectCapsuleSet, VoteWeights, FEATURE_DIM, N_CLASSES, OBJECT_DIM};

#[derive(Debug, Clone)]
pub struct CapsuleModel {
    pub encoder: Encoder,
    pub votes: VoteWeights,
    pub decoder: Decoder,
}

#[derive(Debug)]
pub struct ModelGrads {
    pub encoder: EncoderGrads,
    pub votes: Array3<f32>,
    pub decoder: DecoderGrad,
}

impl CapsuleModel {
    /// Builds a freshly initialized model for the configured encoder.
    pub fn new(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = match config.encoder_kind {
            EncoderKind::Conv2 => Encoder::Conv2(Conv2Encoder::standard(&mut rng)),
            EncoderKind::ResNet18 => Encoder::ResNet18(ResNetEncoder::new(&mut rng)),
        };
        Self::with_encoder(encoder, &mut rng)
    }

    /// Attaches vote weights and a decoder to an existing backbone; test code
    /// uses this to build micro models with a handful of feature capsules.
    pub fn with_encoder<R: Rng>(encoder: Encoder, rng: &mut R) -> Self {
        let n_f = encoder.n_feature_caps();
        // variance-preserving scale: vote sums over n_f capsules keep the
        // squash input in its sensitive range regardless of capsule count
        let std = 1.0 / (n_f as f64).sqrt();
        let votes = VoteWeights::new(init::normal(
            rng,
            (n_f, FEATURE_DIM, N_CLASSES * OBJECT_DIM),
            std,
        ))
        .expect("vote weight shape");
        let decoder = Decoder::new(rng);
        CapsuleModel {
            encoder,
            votes,
            decoder,
        }
    }

    pub fn n_feature_caps(&self) -> usize {
        self.encoder.n_feature_caps()
    }

    pub fn n_params(&self) -> usize {
        self.encoder.n_params() + self.votes.w.len() + self.decoder.n_params()
    }

    /// Optimizer view: `(param, grad)` pairs in a stable order.
    pub fn adam_pairs<'a>(
        &'a mut self,
        grads: &'a ModelGrads,
    ) -> Vec<(ArrayViewMutD<'a, f32>, ArrayViewD<'a, f32>)> {
        let mut pairs: Vec<(ArrayViewMutD<'a, f32>, ArrayViewD<'a, f32>)> = Vec::new();
        match (&mut self.encoder, &grads.encoder) {
            (Encoder::Conv2(e), EncoderGrads::Conv2(g)) => {
                pairs.push((e.backbone.conv1.w.view_mut().into_dyn(), g.conv1.w.view().into_dyn()));
                if let (Some(b), Some(gb)) = (e.backbone.conv1.b.as_mut(), g.conv1.b.as_ref()) {
                    pairs.push((b.view_mut().into_dyn(), gb.view().into_dyn()));
                }
                pairs.push((e.backbone.conv2.w.view_mut().into_dyn(), g.conv2.w.view().into_dyn()));
                if let (Some(b), Some(gb)) = (e.backbone.conv2.b.as_mut(), g.conv2.b.as_ref()) {
                    pairs.push((b.view_mut().into_dyn(), gb.view().into_dyn()));
                }
            }
            (Encoder::ResNet18(e), EncoderGrads::ResNet18(g)) => {
                pairs.push((e.backbone.stem.w.view_mut().into_dyn(), g.stem.w.view().into_dyn()));
                pairs.push((
                    e.backbone.stem_bn.gamma.view_mut().into_dyn(),
                    g.stem_bn.gamma.view().into_dyn(),
                ));
                pairs.push((
                    e.backbone.stem_bn.beta.view_mut().into_dyn(),
                    g.stem_bn.beta.view().into_dyn(),
                ));
                for (block, bg) in e.backbone.blocks.iter_mut().zip(g.blocks.iter()) {
                    append_block_pairs(block, bg, &mut pairs);
                }
            }
            _ => unreachable!("gradient kind matches encoder kind"),
        }
        pairs.push((
            self.votes.w.view_mut().into_dyn(),
            grads.votes.view().into_dyn(),
        ));
        for (lin, lg) in [
            (&mut self.decoder.fc1, &grads.decoder.fc1),
            (&mut self.decoder.fc2, &grads.decoder.fc2),
            (&mut self.decoder.fc3, &grads.decoder.fc3),
        ] {
            pairs.push((lin.w.view_mut().into_dyn(), lg.w.view().into_dyn()));
            pairs.push((lin.b.view_mut().into_dyn(), lg.b.view().into_dyn()));
        }
        pairs
    }

    /// All tensors persisted to a checkpoint (trainables plus normalization
    /// running statistics), natural shapes, stable name order.
    pub fn named_tensors(&self) -> Vec<(String, ArrayD<f32>)> {
        let mut out: Vec<(String, ArrayD<f32>)> = Vec::new();
        match &self.encoder {
            Encoder::Conv2(e) => {
                push_conv("encoder.conv1", &e.backbone.conv1, &mut out);
                push_conv("encoder.conv2", &e.backbone.conv2, &mut out);
            }
            Encoder::ResNet18(e) => {
                push_conv("encoder.stem", &e.backbone.stem, &mut out);
                push_bn("encoder.stem_bn", &e.backbone.stem_bn, &mut out);
                for (i, b) in e.backbone.blocks.iter().enumerate() {
                    let p = format!("encoder.block{i}");
                    push_conv(&format!("{p}.conv1"), &b.conv1, &mut out);
                    push_bn(&format!("{p}.bn1"), &b.bn1, &mut out);
                    push_conv(&format!("{p}.conv2"), &b.conv2, &mut out);
                    push_bn(&format!("{p}.bn2"), &b.bn2, &mut out);
                    if let Some((c, bn)) = &b.down {
                        push_conv(&format!("{p}.down.conv"), c, &mut out);
                        push_bn(&format!("{p}.down.bn"), bn, &mut out);
                    }
                }
            }
        }
        out.push((
            "votes.weight".to_string(),
            self.votes.to_natural().into_dyn(),
        ));
        push_linear("decoder.fc1", &self.decoder.fc1, &mut out);
        push_linear("decoder.fc2", &self.decoder.fc2, &mut out);
        push_linear("decoder.fc3", &self.decoder.fc3, &mut out);
        out
    }

    /// Restores every tensor from a named map; names and shapes must match
    /// this model's architecture exactly.
    pub fn load_named(&mut self, tensors: &[(String, ArrayD<f32>)]) -> Result<()> {
        let mut map: std::collections::BTreeMap<&str, &ArrayD<f32>> = tensors
            .iter()
            .map(|(name, arr)| (name.as_str(), arr))
            .collect();
        let expected = self.named_tensors();
        for (name, current) in &expected {
            let found = map.remove(name.as_str()).ok_or_else(|| {
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
        if let Some((name, _)) = map.into_iter().next() {
            return Err(Error::Checkpoint(format!(
                "checkpoint contains unexpected tensor '{name}'"
            )));
        }
        let by_name: std::collections::BTreeMap<&str, &ArrayD<f32>> = tensors
            .iter()
            .map(|(name, arr)| (name.as_str(), arr))
            .collect();
        let take = |name: &str| -> ArrayD<f32> { (*by_name.get(name).unwrap()).clone() };
        match &mut self.encoder {
            Encoder::Conv2(e) => {
                load_conv("encoder.conv1", &mut e.backbone.conv1, &take);
                load_conv("encoder.conv2", &mut e.backbone.conv2, &take);
            }
            Encoder::ResNet18(e) => {
                load_conv("encoder.stem", &mut e.backbone.stem, &take);
                load_bn("encoder.stem_bn", &mut e.backbone.stem_bn, &take);
                for (i, b) in e.backbone.blocks.iter_mut().enumerate() {
                    let p = format!("encoder.block{i}");
                    load_conv(&format!("{p}.conv1"), &mut b.conv1, &take);
                    load_bn(&format!("{p}.bn1"), &mut b.bn1, &take);
                    load_conv(&format!("{p}.conv2"), &mut b.conv2, &take);
                    load_bn(&format!("{p}.bn2"), &mut b.bn2, &take);
                    if let Some((c, bn)) = b.down.as_mut() {
                        load_conv(&format!("{p}.down.conv"), c, &take);
                        load_bn(&format!("{p}.down.bn"), bn, &take);
                    }
                }
            }
        }
        let natural = take("votes.weight")
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        self.votes = VoteWeights::from_natural(natural)?;
        load_linear("decoder.fc1", &mut self.decoder.fc1, &take);
        load_linear("decoder.fc2", &mut self.decoder.fc2, &take);
        load_linear("decoder.fc3", &mut self.decoder.fc3, &take);
        Ok(())
    }
}

pub(crate) fn append_block_pairs<'a>(
    block: &'a mut crate::encoder::resnet::BasicBlock,
    bg: &'a BlockGrads,
    pairs: &mut Vec<(ArrayViewMutD<'a, f32>, ArrayViewD<'a, f32>)>,
) {
    pairs.push((
        block.conv1.w.view_mut().into_dyn(),
        bg.conv1.w.view().into_dyn(),
    ));
    pairs.push((
        block.bn1.gamma.view_mut().into_dyn(),
        bg.bn1.gamma.view().into_dyn(),
    ));
    pairs.push((
        block.bn1.beta.view_mut().into_dyn(),
        bg.bn1.beta.view().into_dyn(),
    ));
    pairs.push((
        block.conv2.w.view_mut().into_dyn(),
        bg.conv2.w.view().into_dyn(),
    ));
    pairs.push((
        block.bn2.gamma.view_mut().into_dyn(),
        bg.bn2.gamma.view().into_dyn(),
    ));
    pairs.push((
        block.bn2.beta.view_mut().into_dyn(),
        bg.bn2.beta.view().into_dyn(),
    ));
    if let (Some((conv, bn)), Some((gconv, gbn))) = (block.down.as_mut(), bg.down.as_ref()) {
        pairs.push((conv.w.view_mut().into_dyn(), gconv.w.view().into_dyn()));
        pairs.push((bn.gamma.view_mut().into_dyn(), gbn.gamma.view().into_dyn()));
        pairs.push((bn.beta.view_mut().into_dyn(), gbn.beta.view().into_dyn()));
    }
}

pub(crate) fn push_conv(prefix: &str, conv: &crate::nn::Conv2d, out: &mut Vec<(String, ArrayD<f32>)>) {
    let natural = conv
        .w
        .clone()
        .into_shape_with_order(IxDyn(&[conv.c_out, conv.c_in, conv.k, conv.k]))
        .expect("conv weight contiguous");
    out.push((format!("{prefix}.weight"), natural));
    if let Some(b) = &conv.b {
        out.push((format!("{prefix}.bias"), b.clone().into_dyn()));
    }
}

pub(crate) fn load_conv(prefix: &str, conv: &mut crate::nn::Conv2d, take: &dyn Fn(&str) -> ArrayD<f32>) {
    let w = take(&format!("{prefix}.weight"));
    conv.w = w
        .into_shape_with_order((conv.c_out, conv.c_in * conv.k * conv.k))
        .expect("conv weight size");
    if let Some(b) = conv.b.as_mut() {
        *b = take(&format!("{prefix}.bias"))
            .into_dimensionality()
            .expect("bias rank");
    }
}

pub(crate) fn push_bn(prefix: &str, bn: &crate::nn::BatchNorm2d, out: &mut Vec<(String, ArrayD<f32>)>) {
    out.push((format!("{prefix}.gamma"), bn.gamma.clone().into_dyn()));
    out.push((format!("{prefix}.beta"), bn.beta.clone().into_dyn()));
    out.push((
        format!("{prefix}.running_mean"),
        bn.running_mean.clone().into_dyn(),
    ));
    out.push((
        format!("{prefix}.running_var"),
        bn.running_var.clone().into_dyn(),
    ));
}

pub(crate) fn load_bn(prefix: &str, bn: &mut crate::nn::BatchNorm2d, take: &dyn Fn(&str) -> ArrayD<f32>) {
    bn.gamma = take(&format!("{prefix}.gamma"))
        .into_dimensionality()
        .expect("gamma rank");
    bn.beta = take(&format!("{prefix}.beta"))
        .into_dimensionality()
        .expect("beta rank");
    bn.running_mean = take(&format!("{prefix}.running_mean"))
        .into_dimensionality()
        .expect("running_mean rank");
    bn.running_var = take(&format!("{prefix}.running_var"))
        .into_dimensionality()
        .expect("running_var rank");
}

pub(crate) fn push_linear(prefix: &str, lin: &Linear, out: &mut Vec<(String, ArrayD<f32>)>) {
    out.push((format!("{prefix}.weight"), lin.w.clone().into_dyn()));
    out.push((format!("{prefix}.bias"), lin.b.clone().into_dyn()));
}

pub(crate) fn load_linear(prefix: &str, lin: &mut Linear, take: &dyn Fn(&str) -> ArrayD<f32>) {
    lin.w = take(&format!("{prefix}.weight"))
        .into_dimensionality()
        .expect("weight rank");
    lin.b = take(&format!("{prefix}.bias"))
        .into_dimensionality()
        .expect("bias rank");
}

/// Decoder input with only each sample's labeled capsule kept (teacher
/// masking during training).
pub fn teacher_masked_input(objects: &ObjectCapsuleSet, labels: &[u8]) -> Array2<f32> {
    let (b, _, d) = objects.poses.dim();
    debug_assert_eq!(b, labels.len());
    let mut x = Array2::zeros((b, N_CLASSES * OBJECT_DIM));
    for (s, &label) in labels.iter().enumerate() {
        let j = label as usize;
        let lo = j * d;
        x.row_mut(s)
            .slice_mut(ndarray::s![lo..lo + d])
            .assign(&objects.poses.index_axis(Axis(0), s).row(j));
    }
    x
}
