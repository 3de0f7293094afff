//! Losses, frequency-filtered reconstruction targets, and the end-to-end
//! training loop (Adam, exponential learning-rate decay, early stopping on
//! validation accuracy).
//!
//! Training runs one global step per example with the configured number of
//! routing iterations. Routing coefficients are computed on the fly but
//! treated as constants by backpropagation: gradients flow through the
//! coefficient-weighted vote sum into the vote weights and encoder, and
//! through the reconstruction loss into the decoder, never through the
//! coefficient updates themselves.

use ndarray::{s, Array2, Array3, Array4, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::binding::{
    compute_votes, route, squash_rows, squash_rows_backward, votes_backward,
    weighted_vote_sum, weighted_vote_sum_backward,
};
use crate::config::{ModelConfig, ReconTargetMode};
use crate::error::{Error, Result};
use crate::model::{teacher_masked_input, CapsuleModel, ModelGrads};
use crate::nn::Adam;
use crate::types::{ImageBatch, ObjectCapsuleSet, N_CLASSES, N_PIXELS, OBJECT_DIM};

pub const MARGIN_POS: f64 = 0.9;
pub const MARGIN_NEG: f64 = 0.1;
pub const MARGIN_LAMBDA: f64 = 0.5;

/// Low-pass cutoff (cycles per image) for low-frequency targets.
pub const LOW_PASS_CUTOFF: f64 = 6.0;
/// High-pass cutoff (cycles per image) for high-frequency targets.
pub const HIGH_PASS_CUTOFF: f64 = 30.0;

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Per-class hinge loss on capsule scores: the labeled class is pushed above
/// 0.9, the rest below 0.1 (with a 0.5 down-weight).
pub fn margin_loss(class_scores: ArrayView1<'_, f32>, label: usize) -> f64 {
    let mut total = 0.0f64;
    for (k, &s) in class_scores.iter().enumerate() {
        let s = s as f64;
        if k == label {
            let t = (MARGIN_POS - s).max(0.0);
            total += t * t;
        } else {
            let t = (s - MARGIN_NEG).max(0.0);
            total += MARGIN_LAMBDA * t * t;
        }
    }
    total
}

/// Batch-mean margin loss and its gradient w.r.t. the scores.
pub fn margin_loss_batch(scores: &Array2<f32>, labels: &[u8]) -> (f64, Array2<f32>) {
    let b = scores.dim().0;
    debug_assert_eq!(b, labels.len());
    let mut grad = Array2::zeros(scores.raw_dim());
    let mut total = 0.0f64;
    for (sidx, &label) in labels.iter().enumerate() {
        total += margin_loss(scores.row(sidx), label as usize);
        for k in 0..N_CLASSES {
            let sv = scores[[sidx, k]] as f64;
            grad[[sidx, k]] = if k == label as usize {
                (-2.0 * (MARGIN_POS - sv).max(0.0) / b as f64) as f32
            } else {
                (2.0 * MARGIN_LAMBDA * (sv - MARGIN_NEG).max(0.0) / b as f64) as f32
            };
        }
    }
    (total / b as f64, grad)
}

/// Mean squared error between a reconstruction and its target image.
pub fn reconstruction_loss(recon: &Array2<f32>, target: &Array2<f32>) -> f64 {
    -crate::decoder::reconstruction_score(recon, target)
}

// ---------------------------------------------------------------------------
// frequency-filtered reconstruction targets
// ---------------------------------------------------------------------------

fn fft_2d(data: &mut Vec<Complex<f64>>, n: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    // rows
    for row in data.chunks_exact_mut(n) {
        fft.process(row);
    }
    // columns
    let mut col = vec![Complex::default(); n];
    for c in 0..n {
        for r in 0..n {
            col[r] = data[r * n + c];
        }
        fft.process(&mut col);
        for r in 0..n {
            data[r * n + c] = col[r];
        }
    }
}

fn signed_frequency(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Amplitude response of the Gaussian low-pass: half power at the cutoff.
fn low_pass_gain(f: f64, cutoff: f64) -> f64 {
    (-(std::f64::consts::LN_2 / 2.0) * (f / cutoff).powi(2)).exp()
}

/// Amplitude response of the complementary Gaussian high-pass, calibrated so
/// its own half-power point also sits at the cutoff.
fn high_pass_gain(f: f64, cutoff: f64) -> f64 {
    // 1 - exp(-k x^2) = 1/sqrt(2) at x = 1  =>  k = ln(1/(1 - 1/sqrt(2)))
    let k = (1.0 / (1.0 - std::f64::consts::FRAC_1_SQRT_2)).ln();
    1.0 - (-k * (f / cutoff).powi(2)).exp()
}

/// Produces the reconstruction target for one image: identity, Gaussian
/// low-pass (6 cycles/image) or Gaussian high-pass (30 cycles/image), with
/// the result clipped back to `[0, 1]`.
pub fn frequency_target(image: &Array2<f32>, mode: ReconTargetMode) -> Array2<f32> {
    if mode == ReconTargetMode::FullSpectrum {
        return image.clone();
    }
    let (h, w) = image.dim();
    debug_assert_eq!(h, w, "square images only");
    let n = h;
    let mut buf: Vec<Complex<f64>> = image
        .iter()
        .map(|&v| Complex::new(v as f64, 0.0))
        .collect();
    fft_2d(&mut buf, n, false);
    for ky in 0..n {
        for kx in 0..n {
            let f = (signed_frequency(ky, n).powi(2) + signed_frequency(kx, n).powi(2)).sqrt();
            let gain = match mode {
                ReconTargetMode::LowFreq => low_pass_gain(f, LOW_PASS_CUTOFF),
                ReconTargetMode::HighFreq => high_pass_gain(f, HIGH_PASS_CUTOFF),
                ReconTargetMode::FullSpectrum => 1.0,
            };
            buf[ky * n + kx] *= gain;
        }
    }
    fft_2d(&mut buf, n, true);
    let norm = 1.0 / (n * n) as f64;
    Array2::from_shape_fn((n, n), |(y, x)| {
        (buf[y * n + x].re * norm).clamp(0.0, 1.0) as f32
    })
}

// ---------------------------------------------------------------------------
// one training step
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub margin: f64,
    pub recon_mse: f64,
    pub total: f64,
    pub correct: usize,
}

/// How the routing coefficients are obtained for a forward pass.
pub enum CoefficientMode<'a> {
    /// Run routing as configured (the normal training path).
    Dynamic,
    /// Use the given `(n_f, batch, 10)` coefficients verbatim. Gradient
    /// checks use this to differentiate exactly the function backprop sees.
    Fixed(&'a Array3<f32>),
}

/// Forward + backward for one mini-batch. Returns batch-mean losses and the
/// gradients of `margin + recon_weight * recon_mse`.
pub fn train_forward_backward(
    model: &mut CapsuleModel,
    images_nchw: &Array4<f32>,
    recon_targets: &Array2<f32>,
    labels: &[u8],
    config: &ModelConfig,
    mode: CoefficientMode<'_>,
) -> (StepMetrics, ModelGrads) {
    let b = images_nchw.dim().0;
    debug_assert_eq!(labels.len(), b);
    let alpha = config.recon_loss_weight;

    // encoder (training mode: batch statistics where applicable)
    let (features, enc_cache) = model.encoder.forward_train(images_nchw);

    // routing; coefficients are constants from backprop's point of view
    let (coefficients, presquash) = match mode {
        CoefficientMode::Dynamic => {
            let out = route(
                &features,
                &model.votes,
                &model.decoder,
                recon_targets,
                config.local_routing_iters,
                !config.disable_feature_binding,
                false,
            );
            (out.coefficients, out.presquash)
        }
        CoefficientMode::Fixed(c) => {
            let votes = compute_votes(&features, &model.votes);
            let presquash = weighted_vote_sum(&votes, c);
            (c.clone(), presquash)
        }
    };
    let d_flat = squash_rows(
        presquash
            .view()
            .into_shape_with_order((b * N_CLASSES, OBJECT_DIM))
            .expect("contiguous"),
    )
    .into_shape_with_order((b, N_CLASSES * OBJECT_DIM))
    .expect("same size");
    let objects = ObjectCapsuleSet {
        poses: d_flat
            .clone()
            .into_shape_with_order((b, N_CLASSES, OBJECT_DIM))
            .expect("contiguous"),
    };
    let scores = objects.class_scores();

    // losses
    let (margin, g_scores) = margin_loss_batch(&scores, labels);
    let dec_in = teacher_masked_input(&objects, labels);
    let dec_cache = model.decoder.forward(&dec_in);
    let recon = dec_cache.output();
    let mut recon_sse = 0.0f64;
    for (r, t) in recon.iter().zip(recon_targets.iter()) {
        let d = *r as f64 - *t as f64;
        recon_sse += d * d;
    }
    let recon_mse = recon_sse / (b * N_PIXELS) as f64;
    let total = margin + alpha * recon_mse;
    let correct = (0..b)
        .filter(|&sidx| {
            let row = scores.row(sidx);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best == labels[sidx] as usize
        })
        .count();

    // ---- backward ----
    // margin -> object capsules through the score norms
    let mut g_d = Array2::<f32>::zeros((b, N_CLASSES * OBJECT_DIM));
    for sidx in 0..b {
        for j in 0..N_CLASSES {
            let norm = scores[[sidx, j]];
            if norm > 1e-12 {
                let coef = g_scores[[sidx, j]] / norm;
                let lo = j * OBJECT_DIM;
                for o in 0..OBJECT_DIM {
                    g_d[[sidx, lo + o]] += coef * d_flat[[sidx, lo + o]];
                }
            }
        }
    }
    // reconstruction -> decoder and (via the teacher mask) the labeled capsule
    let g_recon = {
        let mut g = recon.clone();
        let scale = (2.0 * alpha / (b * N_PIXELS) as f64) as f32;
        ndarray::Zip::from(&mut g)
            .and(recon_targets)
            .for_each(|gv, &t| *gv = (*gv - t) * scale);
        g
    };
    let (decoder_grads, g_dec_in) = model.decoder.backward(&dec_cache, &g_recon);
    for (sidx, &label) in labels.iter().enumerate() {
        let lo = label as usize * OBJECT_DIM;
        for o in 0..OBJECT_DIM {
            g_d[[sidx, lo + o]] += g_dec_in[[sidx, lo + o]];
        }
    }
    // through the squash into the weighted vote sum
    let g_presquash = {
        let pre_rows = presquash
            .view()
            .into_shape_with_order((b * N_CLASSES, OBJECT_DIM))
            .expect("contiguous")
            .to_owned();
        let g_rows = g_d
            .view()
            .into_shape_with_order((b * N_CLASSES, OBJECT_DIM))
            .expect("contiguous")
            .to_owned();
        squash_rows_backward(&pre_rows, &g_rows)
            .into_shape_with_order((b, N_CLASSES * OBJECT_DIM))
            .expect("same size")
    };
    let g_votes = weighted_vote_sum_backward(&g_presquash, &coefficients);
    let (g_w, g_poses) = votes_backward(&features, &model.votes, &g_votes);
    let encoder_grads = model.encoder.backward(&enc_cache, &g_poses);

    (
        StepMetrics {
            margin,
            recon_mse,
            total,
            correct,
        },
        ModelGrads {
            encoder: encoder_grads,
            votes: g_w,
            decoder: decoder_grads,
        },
    )
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

/// Learning rate after `epoch` full epochs: `initial * decay^epoch`.
pub fn lr_at(initial: f64, decay: f64, epoch: usize) -> f64 {
    initial * decay.powi(epoch as i32)
}

/// Early stopping on validation accuracy: halt once `patience` epochs pass
/// without a new best.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    pub best_accuracy: f64,
    pub best_epoch: usize,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best_accuracy: f64::NEG_INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records one epoch; returns `(is_new_best, should_stop)`.
    pub fn observe(&mut self, epoch: usize, accuracy: f64) -> (bool, bool) {
        if accuracy > self.best_accuracy {
            self.best_accuracy = accuracy;
            self.best_epoch = epoch;
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best >= self.patience)
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

impl TrainLog {
    /// CSV with the columns `epoch,lr,train_loss,val_accuracy`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_accuracy\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch, r.lr, r.train_loss, r.val_accuracy
            ));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Hard cap on epochs (early stopping usually fires first).
    pub max_epochs: usize,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            max_epochs: 200,
            verbose: true,
        }
    }
}

fn gather_batch(
    images: &ImageBatch,
    labels: &[u8],
    idxs: &[usize],
    mode: ReconTargetMode,
) -> (Array4<f32>, Array2<f32>, Vec<u8>) {
    let b = idxs.len();
    let mut nchw = Array4::zeros((b, 1, 28, 28));
    let mut targets = Array2::zeros((b, N_PIXELS));
    let mut batch_labels = Vec::with_capacity(b);
    for (row, &idx) in idxs.iter().enumerate() {
        let img = images.data().index_axis(Axis(0), idx);
        nchw.slice_mut(s![row, 0, .., ..]).assign(&img);
        let target = match mode {
            ReconTargetMode::FullSpectrum => img.to_owned(),
            m => frequency_target(&img.to_owned(), m),
        };
        targets
            .row_mut(row)
            .assign(&target.into_shape_with_order(N_PIXELS).expect("contiguous"));
        batch_labels.push(labels[idx]);
    }
    (nchw, targets, batch_labels)
}

/// Classification accuracy with a single global step (the training-time
/// forward), evaluation-mode encoder.
pub fn eval_accuracy_single_step(
    model: &CapsuleModel,
    images: &ImageBatch,
    labels: &[u8],
    config: &ModelConfig,
) -> f64 {
    let n = images.len();
    if n == 0 {
        return 0.0;
    }
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + config.batch_size).min(n);
        let idxs: Vec<usize> = (start..end).collect();
        let (nchw, raw_flat, batch_labels) =
            gather_batch(images, labels, &idxs, ReconTargetMode::FullSpectrum);
        let features = model.encoder.forward_eval(&nchw);
        let out = route(
            &features,
            &model.votes,
            &model.decoder,
            &raw_flat,
            config.local_routing_iters,
            !config.disable_feature_binding,
            false,
        );
        let scores = out.objects.class_scores();
        for (sidx, &label) in batch_labels.iter().enumerate() {
            let row = scores.row(sidx);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            if best == label as usize {
                correct += 1;
            }
        }
        start = end;
    }
    correct as f64 / n as f64
}

/// Trains on clean images with a 90/10 train/validation split and returns
/// the best-validation model plus the per-epoch log.
pub fn train(
    images: &ImageBatch,
    labels: &[u8],
    config: &ModelConfig,
    seed: u64,
    opts: &TrainOptions,
) -> Result<(CapsuleModel, TrainLog)> {
    let n = images.len();
    if n == 0 {
        return Err(Error::Training("empty training dataset".to_string()));
    }
    if labels.len() != n {
        return Err(Error::Training(format!(
            "{} images but {} labels",
            n,
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let val_n = ((n as f64 * config.validation_fraction).round() as usize).clamp(1, n - 1);
    let (val_idx, train_idx) = order.split_at(val_n);
    let val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();

    let val_images = ImageBatch::from_raw(images.data().select(Axis(0), &val_idx));
    let val_labels: Vec<u8> = val_idx.iter().map(|&i| labels[i]).collect();

    let mut model = CapsuleModel::new(config, seed);
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
            let (nchw, targets, batch_labels) =
                gather_batch(images, labels, chunk, config.recon_target_mode);
            let (metrics, grads) = train_forward_backward(
                &mut model,
                &nchw,
                &targets,
                &batch_labels,
                config,
                CoefficientMode::Dynamic,
            );
            if !metrics.total.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {} at epoch {epoch}, batch {batch_no} (lr {lr}); \
                     if this persists, drop initial_lr to 0.001",
                    metrics.total
                )));
            }
            loss_sum += metrics.total * chunk.len() as f64;
            seen += chunk.len();
            adam.step(model.adam_pairs(&grads), lr);
        }
        let train_loss = loss_sum / seen as f64;
        let val_accuracy = eval_accuracy_single_step(&model, &val_images, &val_labels, config);
        log.rows.push(EpochRow {
            epoch,
            lr,
            train_loss,
            val_accuracy,
        });
        if opts.verbose {
            eprintln!(
                "epoch {epoch:3}  lr {lr:.6}  train_loss {train_loss:.6}  val_acc {val_accuracy:.4}"
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
