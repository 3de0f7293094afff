//! Shared domain types: image batches, capsule fields, routing state and the
//! per-inference trace.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, Axis};

use crate::error::{Error, Result};

pub const IMAGE_SIDE: usize = 28;
pub const N_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const N_CLASSES: usize = 10;
pub const FEATURE_DIM: usize = 8;
pub const OBJECT_DIM: usize = 16;

/// Batch of grayscale images with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    data: Array3<f32>,
}

impl ImageBatch {
    /// Validates shape (`batch x 28 x 28`) and the `[0, 1]` intensity range.
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (_, h, w) = data.dim();
        if h != IMAGE_SIDE || w != IMAGE_SIDE {
            return Err(Error::shape(format!(
                "images must be {IMAGE_SIDE}x{IMAGE_SIDE}, got {h}x{w}"
            )));
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::shape(
                "image intensities must lie in [0, 1]".to_string(),
            ));
        }
        Ok(ImageBatch { data })
    }

    /// Wraps data already known to satisfy the invariants.
    pub(crate) fn from_raw(data: Array3<f32>) -> Self {
        debug_assert_eq!(data.dim().1, IMAGE_SIDE);
        debug_assert_eq!(data.dim().2, IMAGE_SIDE);
        ImageBatch { data }
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn view(&self) -> ArrayView3<'_, f32> {
        self.data.view()
    }

    pub fn len(&self) -> usize {
        self.data.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, idx: usize) -> Array2<f32> {
        self.data.index_axis(Axis(0), idx).to_owned()
    }

    /// The first `n` images as a new batch.
    pub fn take_prefix(&self, n: usize) -> ImageBatch {
        let n = n.min(self.len());
        ImageBatch {
            data: self.data.slice(ndarray::s![..n, .., ..]).to_owned(),
        }
    }

    /// Batch holding a single image.
    pub fn from_single(image: Array2<f32>) -> Result<Self> {
        let (h, w) = image.dim();
        let data = image
            .into_shape_with_order((1, h, w))
            .map_err(|e| Error::shape(e.to_string()))?;
        ImageBatch::new(data)
    }
}

/// Feature-capsule poses produced by the encoder: `batch x n_f x 8`.
#[derive(Debug, Clone)]
pub struct FeatureCapsuleField {
    pub poses: Array3<f32>,
}

impl FeatureCapsuleField {
    pub fn batch(&self) -> usize {
        self.poses.dim().0
    }

    pub fn n_capsules(&self) -> usize {
        self.poses.dim().1
    }
}

/// The ten object capsules: `batch x 10 x 16`. The norm of each 16-vector is
/// that class's presence score.
#[derive(Debug, Clone)]
pub struct ObjectCapsuleSet {
    pub poses: Array3<f32>,
}

impl ObjectCapsuleSet {
    pub fn batch(&self) -> usize {
        self.poses.dim().0
    }

    /// Class presence scores: per-capsule vector norms, `batch x 10`.
    pub fn class_scores(&self) -> Array2<f32> {
        let (b, k, _) = self.poses.dim();
        let mut scores = Array2::zeros((b, k));
        for ((i, j), s) in scores.indexed_iter_mut() {
            let row = self.poses.index_axis(Axis(0), i);
            let v = row.index_axis(Axis(0), j);
            *s = v.dot(&v).sqrt();
        }
        scores
    }
}

/// Trainable 8 -> 16 transformation per (feature, object) capsule pair.
///
/// Stored compute-friendly as `(n_f, 8, 10 * 16)`; the natural-shape view is
/// `(n_f, 10, 8, 16)`.
#[derive(Debug, Clone)]
pub struct VoteWeights {
    pub w: Array3<f32>,
}

impl VoteWeights {
    pub fn new(w: Array3<f32>) -> Result<Self> {
        let (_, f, jo) = w.dim();
        if f != FEATURE_DIM || jo != N_CLASSES * OBJECT_DIM {
            return Err(Error::shape(format!(
                "vote weights must be (n_f, {FEATURE_DIM}, {}), got {:?}",
                N_CLASSES * OBJECT_DIM,
                w.dim()
            )));
        }
        Ok(VoteWeights { w })
    }

    pub fn n_feature_caps(&self) -> usize {
        self.w.dim().0
    }

    /// Natural layout `(n_f, n_obj, 8, 16)`.
    pub fn to_natural(&self) -> Array4<f32> {
        let (n_f, f, _) = self.w.dim();
        let v = self
            .w
            .view()
            .into_shape_with_order((n_f, f, N_CLASSES, OBJECT_DIM))
            .expect("contiguous vote weights");
        v.permuted_axes([0, 2, 1, 3]).as_standard_layout().to_owned()
    }

    pub fn from_natural(natural: Array4<f32>) -> Result<Self> {
        let (n_f, j, f, o) = natural.dim();
        if j != N_CLASSES || f != FEATURE_DIM || o != OBJECT_DIM {
            return Err(Error::shape(format!(
                "natural vote weights must be (n_f, {N_CLASSES}, {FEATURE_DIM}, {OBJECT_DIM}), got {:?}",
                natural.dim()
            )));
        }
        let w = natural
            .permuted_axes([0, 2, 1, 3])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((n_f, FEATURE_DIM, N_CLASSES * OBJECT_DIM))
            .expect("contiguous after permute");
        Ok(VoteWeights { w })
    }
}

/// Per-(feature, object) routing coefficients for one sample.
///
/// `c = a * r` elementwise; after any routing update `a` and `r` lie in
/// `[0.5, 1]`, so `c` lies in `[0.25, 1]`. At initialization all three are 1.
#[derive(Debug, Clone)]
pub struct RoutingState {
    /// Agreement accumulator, `n_f x 10`.
    pub a: Array2<f32>,
    /// Reconstruction-score factor, `n_f x 10`.
    pub r: Array2<f32>,
    /// Binding coefficients, `n_f x 10`.
    pub c: Array2<f32>,
}

impl RoutingState {
    pub fn initial(n_f: usize) -> Self {
        RoutingState {
            a: Array2::ones((n_f, N_CLASSES)),
            r: Array2::ones((n_f, N_CLASSES)),
            c: Array2::ones((n_f, N_CLASSES)),
        }
    }
}

/// One captured routing iteration: the coefficient state plus the class and
/// reconstruction scores the iteration produced.
#[derive(Debug, Clone)]
pub struct RoutingSnapshot {
    pub state: RoutingState,
    /// Class scores from the object capsules formed this iteration.
    pub class_scores: Array1<f32>,
    /// Raw per-class reconstruction scores (negative MSE).
    pub recon_scores: Array1<f32>,
}

/// Record of one global step of iterative inference.
#[derive(Debug, Clone)]
pub struct TraceStep {
    /// Reconstruction of the most likely class at this step.
    pub reconstruction: Array2<f32>,
    /// Boolean spatial mask derived from that reconstruction.
    pub mask: Array2<bool>,
    /// Input handed to the next step: masked and renormalized.
    pub masked_input: Array2<f32>,
    pub class_scores: Array1<f32>,
    pub entropy: f64,
    /// Routing iterations, starting with the all-ones initialization.
    /// Empty unless routing capture was requested.
    pub routing_snapshots: Vec<RoutingSnapshot>,
}

/// Per-step trace of one inference; `steps.len() == rt`.
#[derive(Debug, Clone)]
pub struct InferenceTrace {
    pub steps: Vec<TraceStep>,
    /// Global steps executed before the entropy criterion was met (or the
    /// step budget ran out).
    pub rt: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn image_batch_rejects_wrong_size() {
        let data = Array3::zeros((2, 27, 28));
        assert!(ImageBatch::new(data).is_err());
    }

    #[test]
    fn image_batch_rejects_out_of_range() {
        let mut data = Array3::zeros((1, 28, 28));
        data[[0, 3, 4]] = 1.25;
        assert!(ImageBatch::new(data).is_err());
    }

    #[test]
    fn class_scores_are_norms() {
        let mut poses = Array3::zeros((1, 10, 16));
        poses[[0, 2, 0]] = 3.0;
        poses[[0, 2, 1]] = 4.0;
        let caps = ObjectCapsuleSet { poses };
        let scores = caps.class_scores();
        assert!((scores[[0, 2]] - 5.0).abs() < 1e-6);
        assert_eq!(scores[[0, 0]], 0.0);
    }

    #[test]
    fn vote_weights_natural_roundtrip() {
        let n_f = 3;
        let w = Array3::from_shape_fn((n_f, 8, 160), |(i, f, jo)| {
            (i * 1000 + f * 100 + jo) as f32
        });
        let vw = VoteWeights::new(w.clone()).unwrap();
        let natural = vw.to_natural();
        // natural[i][j][f][o] must equal stored [i][f][j*16+o]
        assert_eq!(natural[[1, 3, 2, 5]], w[[1, 2, 3 * 16 + 5]]);
        let back = VoteWeights::from_natural(natural).unwrap();
        assert_eq!(back.w, vw.w);
    }

    #[test]
    fn routing_state_initializes_to_one() {
        let st = RoutingState::initial(6);
        assert!(st.c.iter().all(|&v| v == 1.0));
        assert!(st.a.iter().all(|&v| v == 1.0));
        assert!(st.r.iter().all(|&v| v == 1.0));
    }
}
