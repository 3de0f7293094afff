//! Reconstruction-guided dynamic routing between feature and object capsules.
//!
//! Each routing iteration forms object capsules from coefficient-weighted
//! votes, measures how well every class hypothesis reconstructs the current
//! input, and combines the classic vote/output agreement signal with those
//! reconstruction scores. Both factors are max-min normalized per feature
//! capsule across the ten object slots and floored at 0.5, so coefficients
//! can suppress but never fully sever a feature-object link.

use ndarray::parallel::prelude::*;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, Axis};

use crate::decoder::{all_class_decoder_inputs, Decoder};
use crate::types::{
    FeatureCapsuleField, ObjectCapsuleSet, RoutingSnapshot, RoutingState, VoteWeights, N_CLASSES,
    OBJECT_DIM,
};

/// Lower/upper bounds of the max-min rescaling.
pub const MAXMIN_LB: f32 = 0.0;
pub const MAXMIN_UB: f32 = 1.0;
/// Floor applied to both routing factors after normalization.
pub const ROUTING_FLOOR: f32 = 0.5;
/// Division guard for the squash nonlinearity at the origin.
pub const SQUASH_EPS: f64 = 1e-8;

/// Feature-capsule chunk size for order-stable parallel reductions.
const SUM_CHUNK: usize = 64;

// ---------------------------------------------------------------------------
// squash
// ---------------------------------------------------------------------------

/// `v * |v| / (1 + |v|^2)`: keeps direction, maps the norm into [0, 1).
pub fn squash(v: ArrayView1<'_, f32>) -> Array1<f32> {
    let n2: f64 = v.iter().map(|&x| (x as f64) * (x as f64)).sum();
    let scale = (n2 / ((1.0 + n2) * (n2.sqrt() + SQUASH_EPS))) as f32;
    v.mapv(|x| x * scale)
}

/// Applies squash to every row of `(n, d)`.
pub fn squash_rows(x: ArrayView2<'_, f32>) -> Array2<f32> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let n2: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum();
        let scale = (n2 / ((1.0 + n2) * (n2.sqrt() + SQUASH_EPS))) as f32;
        row.mapv_inplace(|v| v * scale);
    }
    out
}

/// Gradient of [`squash_rows`] given the pre-squash rows and output gradient.
pub fn squash_rows_backward(pre: &Array2<f32>, gy: &Array2<f32>) -> Array2<f32> {
    let mut gx = Array2::zeros(pre.raw_dim());
    for ((vrow, grow), mut out) in pre
        .rows()
        .into_iter()
        .zip(gy.rows())
        .zip(gx.rows_mut())
    {
        let n2: f64 = vrow.iter().map(|&v| (v as f64) * (v as f64)).sum();
        if n2 < 1e-24 {
            continue; // squash Jacobian vanishes at the origin
        }
        let n = n2.sqrt();
        let denom = 1.0 + n2;
        let g = n / denom;
        let gprime = (1.0 - n2) / (denom * denom);
        let dot: f64 = vrow
            .iter()
            .zip(grow.iter())
            .map(|(&v, &gy)| v as f64 * gy as f64)
            .sum();
        let coef = gprime / n * dot;
        for ((o, &v), &gyv) in out.iter_mut().zip(vrow.iter()).zip(grow.iter()) {
            *o = (g * gyv as f64 + coef * v as f64) as f32;
        }
    }
    gx
}

/// Squash applied to each capsule vector of a `(batch, n_caps, dim)` field.
pub fn squash_field(x: &Array3<f32>) -> Array3<f32> {
    let (b, n, d) = x.dim();
    let rows = x
        .view()
        .into_shape_with_order((b * n, d))
        .expect("contiguous capsule field");
    squash_rows(rows)
        .into_shape_with_order((b, n, d))
        .expect("same size")
}

pub fn squash_field_backward(pre: &Array3<f32>, gy: &Array3<f32>) -> Array3<f32> {
    let (b, n, d) = pre.dim();
    let pre_rows = pre
        .view()
        .into_shape_with_order((b * n, d))
        .expect("contiguous")
        .to_owned();
    let gy_rows = gy
        .view()
        .into_shape_with_order((b * n, d))
        .expect("contiguous")
        .to_owned();
    squash_rows_backward(&pre_rows, &gy_rows)
        .into_shape_with_order((b, n, d))
        .expect("same size")
}

// ---------------------------------------------------------------------------
// max-min normalization
// ---------------------------------------------------------------------------

/// Rescales each lane along `axis` to `[lb, ub]`. A constant lane (max == min)
/// carries no preference and maps to `ub` everywhere.
pub fn maxmin_normalize(m: ArrayView2<'_, f32>, axis: Axis, lb: f32, ub: f32) -> Array2<f32> {
    assert!(lb < ub, "maxmin bounds must satisfy lb < ub");
    let mut out = m.to_owned();
    for mut lane in out.lanes_mut(axis) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in lane.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi > lo {
            let scale = (ub - lb) / (hi - lo);
            lane.mapv_inplace(|v| lb + (v - lo) * scale);
        } else {
            lane.fill(ub);
        }
    }
    out
}

/// In-place `max(maxmin(., last axis), floor)` over the trailing length-10
/// lanes of a `(n_f, batch, 10)` tensor.
fn maxmin_floor_last_axis(t: &mut Array3<f32>) {
    t.axis_iter_mut(Axis(0))
        .into_par_iter()
        .for_each(|mut per_feature| {
            for mut lane in per_feature.rows_mut() {
                let mut lo = f32::INFINITY;
                let mut hi = f32::NEG_INFINITY;
                for &v in lane.iter() {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                if hi > lo {
                    let scale = (MAXMIN_UB - MAXMIN_LB) / (hi - lo);
                    lane.mapv_inplace(|v| (MAXMIN_LB + (v - lo) * scale).max(ROUTING_FLOOR));
                } else {
                    lane.fill(MAXMIN_UB);
                }
            }
        });
}

/// Same rescale + floor for per-sample `(batch, 10)` reconstruction scores.
fn maxmin_floor_rows(m: &Array2<f32>) -> Array2<f32> {
    let mut out = m.clone();
    for mut lane in out.rows_mut() {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in lane.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi > lo {
            let scale = (MAXMIN_UB - MAXMIN_LB) / (hi - lo);
            lane.mapv_inplace(|v| (MAXMIN_LB + (v - lo) * scale).max(ROUTING_FLOOR));
        } else {
            lane.fill(MAXMIN_UB);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// votes
// ---------------------------------------------------------------------------

/// Per-pair predictions of object poses from feature poses.
///
/// Stored feature-major: `(n_f, batch, 160)`, where the trailing axis is the
/// ten 16-d votes laid out contiguously.
#[derive(Debug, Clone)]
pub struct VoteTensor {
    pub p_hat: Array3<f32>,
}

impl VoteTensor {
    pub fn n_feature_caps(&self) -> usize {
        self.p_hat.dim().0
    }

    pub fn batch(&self) -> usize {
        self.p_hat.dim().1
    }

    /// Single vote `p_hat[sample, i, j]` as a 16-vector.
    pub fn vote(&self, sample: usize, i: usize, j: usize) -> ArrayView1<'_, f32> {
        self.p_hat
            .slice(s![i, sample, j * OBJECT_DIM..(j + 1) * OBJECT_DIM])
    }

    /// Natural layout `(batch, n_f, 10, 16)`.
    pub fn to_natural(&self) -> Array4<f32> {
        let (n_f, b, _) = self.p_hat.dim();
        let v = self
            .p_hat
            .view()
            .into_shape_with_order((n_f, b, N_CLASSES, OBJECT_DIM))
            .expect("contiguous votes");
        v.permuted_axes([1, 0, 2, 3]).as_standard_layout().to_owned()
    }
}

/// Batched 8 -> 16 linear maps: `p_hat[s, i, j] = poses[s, i] . W[i, j]`.
pub fn compute_votes(features: &FeatureCapsuleField, w: &VoteWeights) -> VoteTensor {
    let (b, n_f, _) = features.poses.dim();
    assert_eq!(
        n_f,
        w.n_feature_caps(),
        "feature count mismatch between poses and vote weights"
    );
    let mut p_hat = Array3::zeros((n_f, b, N_CLASSES * OBJECT_DIM));
    p_hat
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(w.w.axis_iter(Axis(0)).into_par_iter())
        .enumerate()
        .for_each(|(i, (mut out_i, w_i))| {
            let poses_i = features.poses.slice(s![.., i, ..]);
            out_i.assign(&poses_i.dot(&w_i));
        });
    VoteTensor { p_hat }
}

/// Gradients of [`compute_votes`] w.r.t. weights and poses.
pub fn votes_backward(
    features: &FeatureCapsuleField,
    w: &VoteWeights,
    g_votes: &Array3<f32>,
) -> (Array3<f32>, Array3<f32>) {
    let (b, n_f, d) = features.poses.dim();
    let mut g_w = Array3::zeros(w.w.raw_dim());
    let mut g_poses = Array3::zeros((b, n_f, d));
    g_w.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(g_poses.axis_iter_mut(Axis(1)).into_par_iter())
        .zip(g_votes.axis_iter(Axis(0)).into_par_iter())
        .zip(w.w.axis_iter(Axis(0)).into_par_iter())
        .enumerate()
        .for_each(|(i, (((mut g_w_i, mut g_poses_i), g_votes_i), w_i))| {
            let poses_i = features.poses.slice(s![.., i, ..]);
            g_w_i.assign(&poses_i.t().dot(&g_votes_i));
            g_poses_i.assign(&g_votes_i.dot(&w_i.t()));
        });
    (g_w, g_poses)
}

/// `sum_i c[i, s, j] * p_hat[i, s, j, :]`, flattened to `(batch, 160)`.
pub fn weighted_vote_sum(votes: &VoteTensor, c: &Array3<f32>) -> Array2<f32> {
    let (n_f, b, width) = votes.p_hat.dim();
    let partials: Vec<Array2<f32>> = votes
        .p_hat
        .axis_chunks_iter(Axis(0), SUM_CHUNK)
        .into_par_iter()
        .zip(c.axis_chunks_iter(Axis(0), SUM_CHUNK).into_par_iter())
        .map(|(v_chunk, c_chunk)| {
            let mut acc = Array2::<f32>::zeros((b, width));
            for i in 0..v_chunk.dim().0 {
                for s in 0..b {
                    let vrow = v_chunk.slice(s![i, s, ..]);
                    let mut arow = acc.row_mut(s);
                    for j in 0..N_CLASSES {
                        let coef = c_chunk[[i, s, j]];
                        let lo = j * OBJECT_DIM;
                        for o in 0..OBJECT_DIM {
                            arow[lo + o] += coef * vrow[lo + o];
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let _ = n_f;
    let mut total = Array2::<f32>::zeros((b, width));
    for p in &partials {
        total += p;
    }
    total
}

/// Spreads an object-capsule gradient back over the votes:
/// `g_votes[i, s, jo] = c[i, s, j] * g_sum[s, jo]`.
pub fn weighted_vote_sum_backward(
    g_sum: &Array2<f32>,
    c: &Array3<f32>,
) -> Array3<f32> {
    let (n_f, b, _) = c.dim();
    let width = g_sum.dim().1;
    let mut g_votes = Array3::zeros((n_f, b, width));
    g_votes
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(c.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut gv_i, c_i)| {
            for s in 0..b {
                let grow = g_sum.row(s);
                let mut out = gv_i.row_mut(s);
                for j in 0..N_CLASSES {
                    let coef = c_i[[s, j]];
                    let lo = j * OBJECT_DIM;
                    for o in 0..OBJECT_DIM {
                        out[lo + o] = coef * grow[lo + o];
                    }
                }
            }
        });
    g_votes
}

// ---------------------------------------------------------------------------
// routing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RouteOutput {
    pub objects: ObjectCapsuleSet,
    /// Final pre-squash vote sums, `(batch, 160)`; backward re-enters here.
    pub presquash: Array2<f32>,
    /// Final binding coefficients, `(n_f, batch, 10)`.
    pub coefficients: Array3<f32>,
    pub votes: VoteTensor,
    /// Per-sample snapshot series (initialization plus one per iteration);
    /// empty unless capture was requested.
    pub snapshots: Vec<Vec<RoutingSnapshot>>,
}

fn object_set_from_flat(d: &Array2<f32>) -> ObjectCapsuleSet {
    let b = d.dim().0;
    ObjectCapsuleSet {
        poses: d
            .clone()
            .into_shape_with_order((b, N_CLASSES, OBJECT_DIM))
            .expect("capsule rows contiguous"),
    }
}

/// Negative per-class reconstruction MSE for each sample: `(batch, 10)`.
fn class_recon_scores(
    caps: &ObjectCapsuleSet,
    decoder: &Decoder,
    targets: &Array2<f32>,
) -> Array2<f32> {
    let b = caps.batch();
    let dec_in = all_class_decoder_inputs(caps);
    let recons = decoder.forward_nograd(&dec_in); // (b*10, 784)
    let n_px = recons.dim().1 as f64;
    let mut scores = Array2::zeros((b, N_CLASSES));
    for s in 0..b {
        let target = targets.row(s);
        for j in 0..N_CLASSES {
            let recon = recons.row(s * N_CLASSES + j);
            let sse: f64 = recon
                .iter()
                .zip(target.iter())
                .map(|(&x, &y)| {
                    let d = x as f64 - y as f64;
                    d * d
                })
                .sum();
            scores[[s, j]] = (-sse / n_px) as f32;
        }
    }
    scores
}

fn capture_snapshot(
    snapshots: &mut [Vec<RoutingSnapshot>],
    a: &Array3<f32>,
    r_obj: &Array2<f32>,
    c: &Array3<f32>,
    class_scores: &Array2<f32>,
    recon_raw: &Array2<f32>,
) {
    let n_f = a.dim().0;
    for (s, per_sample) in snapshots.iter_mut().enumerate() {
        let a_s = a.slice(s![.., s, ..]).to_owned();
        let c_s = c.slice(s![.., s, ..]).to_owned();
        let mut r_s = Array2::zeros((n_f, N_CLASSES));
        for mut row in r_s.rows_mut() {
            row.assign(&r_obj.row(s));
        }
        per_sample.push(RoutingSnapshot {
            state: RoutingState {
                a: a_s,
                r: r_s,
                c: c_s,
            },
            class_scores: class_scores.row(s).to_owned(),
            recon_scores: recon_raw.row(s).to_owned(),
        });
    }
}

/// Runs reconstruction-guided routing and returns the final object capsules.
///
/// With `binding_enabled == false` the coefficients stay at their all-ones
/// initialization and the output is a single squash of the unweighted vote
/// sum (the ablation arm).
pub fn route(
    features: &FeatureCapsuleField,
    w: &VoteWeights,
    decoder: &Decoder,
    targets: &Array2<f32>,
    iters: usize,
    binding_enabled: bool,
    capture: bool,
) -> RouteOutput {
    assert!(iters >= 1, "routing needs at least one iteration");
    let votes = compute_votes(features, w);
    let (n_f, b, _) = votes.p_hat.dim();
    assert_eq!(targets.dim().0, b, "one target image per sample");

    let mut a = Array3::<f32>::ones((n_f, b, N_CLASSES));
    let mut r_obj = Array2::<f32>::ones((b, N_CLASSES));
    let mut c = Array3::<f32>::ones((n_f, b, N_CLASSES));
    let mut snapshots: Vec<Vec<RoutingSnapshot>> =
        if capture { vec![Vec::new(); b] } else { Vec::new() };

    if binding_enabled {
        for _ in 0..iters {
            let presquash = weighted_vote_sum(&votes, &c);
            let d = squash_rows(
                presquash
                    .view()
                    .into_shape_with_order((b * N_CLASSES, OBJECT_DIM))
                    .expect("contiguous"),
            )
            .into_shape_with_order((b, N_CLASSES * OBJECT_DIM))
            .expect("same size");
            let caps = object_set_from_flat(&d);
            let recon_raw = class_recon_scores(&caps, decoder, targets);
            if capture {
                let class_scores = caps.class_scores();
                capture_snapshot(&mut snapshots, &a, &r_obj, &c, &class_scores, &recon_raw);
            }
            // agreement: a[i,s,j] += p_hat[i,s,j] . d[s,j]
            a.axis_iter_mut(Axis(0))
                .into_par_iter()
                .zip(votes.p_hat.axis_iter(Axis(0)).into_par_iter())
                .for_each(|(mut a_i, v_i)| {
                    for s in 0..b {
                        let vrow = v_i.row(s);
                        let drow = d.row(s);
                        for j in 0..N_CLASSES {
                            let lo = j * OBJECT_DIM;
                            let mut dot = 0.0f32;
                            for o in 0..OBJECT_DIM {
                                dot += vrow[lo + o] * drow[lo + o];
                            }
                            a_i[[s, j]] += dot;
                        }
                    }
                });
            maxmin_floor_last_axis(&mut a);
            r_obj = maxmin_floor_rows(&recon_raw);
            // c = a (*) r, with r broadcast over features
            c.axis_iter_mut(Axis(0))
                .into_par_iter()
                .zip(a.axis_iter(Axis(0)).into_par_iter())
                .for_each(|(mut c_i, a_i)| {
                    ndarray::Zip::from(&mut c_i)
                        .and(&a_i)
                        .and(&r_obj)
                        .for_each(|cv, &av, &rv| *cv = av * rv);
                });
        }
    }

    let presquash = weighted_vote_sum(&votes, &c);
    let d_final = squash_rows(
        presquash
            .view()
            .into_shape_with_order((b * N_CLASSES, OBJECT_DIM))
            .expect("contiguous"),
    )
    .into_shape_with_order((b, N_CLASSES * OBJECT_DIM))
    .expect("same size");
    let objects = object_set_from_flat(&d_final);
    if capture {
        let recon_raw = class_recon_scores(&objects, decoder, targets);
        let class_scores = objects.class_scores();
        capture_snapshot(&mut snapshots, &a, &r_obj, &c, &class_scores, &recon_raw);
    }

    RouteOutput {
        objects,
        presquash,
        coefficients: c,
        votes,
        snapshots,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::Decoder;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array3};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    fn shared_decoder() -> &'static Decoder {
        static DEC: OnceLock<Decoder> = OnceLock::new();
        DEC.get_or_init(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            Decoder::new(&mut rng)
        })
    }

    #[test]
    fn squash_zero_vector_is_zero() {
        let v = Array1::zeros(8);
        let s = squash(v.view());
        assert!(s.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn squash_unit_norm_halves() {
        let mut v = Array1::zeros(16);
        v[3] = 1.0;
        let s = squash(v.view());
        let norm: f32 = s.dot(&s).sqrt();
        assert_abs_diff_eq!(norm, 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(s[3], 0.5, epsilon = 1e-6);
    }

    #[test]
    fn squash_norm_three_gives_nine_tenths() {
        let v = array![3.0f32, 0.0, 0.0];
        let s = squash(v.view());
        let norm: f32 = s.dot(&s).sqrt();
        assert_abs_diff_eq!(norm, 0.9, epsilon = 1e-6);
    }

    #[test]
    fn maxmin_simple_row() {
        let m = array![[1.0f32, 2.0, 3.0]];
        let out = maxmin_normalize(m.view(), Axis(1), 0.0, 1.0);
        assert_eq!(out, array![[0.0f32, 0.5, 1.0]]);
    }

    #[test]
    fn maxmin_constant_row_maps_to_ub() {
        let m = array![[5.0f32, 5.0, 5.0]];
        let out = maxmin_normalize(m.view(), Axis(1), 0.0, 1.0);
        assert_eq!(out, array![[1.0f32, 1.0, 1.0]]);
    }

    #[test]
    fn maxmin_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let m: Array2<f32> = crate::nn::init::normal(&mut rng, (4, 10), 2.0);
            let out = maxmin_normalize(m.view(), Axis(1), 0.0, 1.0);
            for i in 0..4 {
                // independent per-row rescale
                let row: Vec<f32> = m.row(i).to_vec();
                let lo = row.iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                for j in 0..10 {
                    let expect = (row[j] - lo) / (hi - lo);
                    assert!((out[[i, j]] - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn votes_zero_features_zero_votes() {
        let features = FeatureCapsuleField {
            poses: Array3::zeros((2, 5, 8)),
        };
        let w = VoteWeights::new(Array3::from_elem((5, 8, 160), 0.3)).unwrap();
        let votes = compute_votes(&features, &w);
        assert!(votes.p_hat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn votes_identity_embedding_recovers_pose() {
        // W[i,j] embeds the 8-d pose into the first 8 of 16 vote dims
        let n_f = 3;
        let mut w = Array3::zeros((n_f, 8, 160));
        for i in 0..n_f {
            for j in 0..N_CLASSES {
                for f in 0..8 {
                    w[[i, f, j * OBJECT_DIM + f]] = 1.0;
                }
            }
        }
        let w = VoteWeights::new(w).unwrap();
        let mut poses = Array3::zeros((1, n_f, 8));
        for f in 0..8 {
            poses[[0, 1, f]] = (f as f32) * 0.1;
        }
        let features = FeatureCapsuleField { poses: poses.clone() };
        let votes = compute_votes(&features, &w);
        for j in 0..N_CLASSES {
            let v = votes.vote(0, 1, j);
            for f in 0..8 {
                assert_abs_diff_eq!(v[f], poses[[0, 1, f]], epsilon = 1e-6);
            }
            for o in 8..16 {
                assert_eq!(v[o], 0.0);
            }
        }
    }

    #[test]
    fn votes_match_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n_f = 6;
        let b = 3;
        let poses: Array3<f32> = crate::nn::init::normal(&mut rng, (b, n_f, 8), 1.0);
        let w_arr: Array3<f32> = crate::nn::init::normal(&mut rng, (n_f, 8, 160), 0.5);
        let w = VoteWeights::new(w_arr.clone()).unwrap();
        let features = FeatureCapsuleField { poses: poses.clone() };
        let votes = compute_votes(&features, &w);
        for s in 0..b {
            for i in 0..n_f {
                for j in 0..N_CLASSES {
                    for o in 0..OBJECT_DIM {
                        // independent scalar accumulation
                        let mut acc = 0.0f64;
                        for f in 0..8 {
                            acc += poses[[s, i, f]] as f64
                                * w_arr[[i, f, j * OBJECT_DIM + o]] as f64;
                        }
                        let got = votes.vote(s, i, j)[o] as f64;
                        assert!(
                            (got - acc).abs() < 1e-5,
                            "vote[{s},{i},{j},{o}]: {got} vs {acc}"
                        );
                    }
                }
            }
        }
    }

    fn random_instance(
        seed: u64,
        n_f: usize,
        b: usize,
    ) -> (FeatureCapsuleField, VoteWeights, Array2<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let poses: Array3<f32> = crate::nn::init::normal(&mut rng, (b, n_f, 8), 0.8);
        let features = FeatureCapsuleField {
            poses: squash_field(&poses),
        };
        let w = VoteWeights::new(crate::nn::init::normal(&mut rng, (n_f, 8, 160), 0.2)).unwrap();
        let targets: Array2<f32> =
            crate::nn::init::normal(&mut rng, (b, 784), 0.3).mapv(|v| v.clamp(0.0, 1.0));
        (features, w, targets)
    }

    #[test]
    fn ablated_single_pass_equals_unweighted_squash_oracle() {
        let (features, w, targets) = random_instance(5, 8, 2);
        let out = route(&features, &w, shared_decoder(), &targets, 1, false, false);
        // scalar oracle: d_j = squash(sum_i p_hat_ij)
        for s in 0..2 {
            for j in 0..N_CLASSES {
                let mut sum = vec![0.0f64; OBJECT_DIM];
                for i in 0..8 {
                    let v = out.votes.vote(s, i, j);
                    for o in 0..OBJECT_DIM {
                        sum[o] += v[o] as f64;
                    }
                }
                let n2: f64 = sum.iter().map(|v| v * v).sum();
                let scale = n2 / ((1.0 + n2) * (n2.sqrt() + SQUASH_EPS));
                for o in 0..OBJECT_DIM {
                    let expect = (sum[o] * scale) as f32;
                    let got = out.objects.poses[[s, j, o]];
                    assert!(
                        (got - expect).abs() < 1e-5,
                        "d[{s},{j},{o}]: {got} vs {expect}"
                    );
                }
            }
        }
        assert!(out.coefficients.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn routing_factors_stay_in_bounds() {
        let (features, w, targets) = random_instance(7, 10, 3);
        let out = route(&features, &w, shared_decoder(), &targets, 3, true, true);
        for per_sample in &out.snapshots {
            assert_eq!(per_sample.len(), 4); // init + 3 iterations
            let init = &per_sample[0];
            assert!(init.state.c.iter().all(|&v| v == 1.0));
            for snap in &per_sample[1..] {
                assert!(snap.state.a.iter().all(|&v| (0.5..=1.0).contains(&v)));
                assert!(snap.state.r.iter().all(|&v| (0.5..=1.0).contains(&v)));
                assert!(snap.state.c.iter().all(|&v| (0.25..=1.0).contains(&v)));
                // c never exceeds a since r <= 1
                for (cv, av) in snap.state.c.iter().zip(snap.state.a.iter()) {
                    assert!(cv <= av);
                }
            }
        }
        assert!(out
            .coefficients
            .iter()
            .all(|&v| (0.25..=1.0).contains(&v)));
    }

    #[test]
    fn weighted_sum_backward_is_transpose_of_forward() {
        // directional check: <g, sum(votes,c)> == <spread(g,c), votes>
        let (features, w, _) = random_instance(23, 6, 2);
        let votes = compute_votes(&features, &w);
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let c: Array3<f32> =
            crate::nn::init::normal(&mut rng, (6, 2, 10), 1.0).mapv(|v| v.abs().min(1.0));
        let g: Array2<f32> = crate::nn::init::normal(&mut rng, (2, 160), 1.0);
        let fwd = weighted_vote_sum(&votes, &c);
        let lhs: f64 = fwd
            .iter()
            .zip(g.iter())
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum();
        let spread = weighted_vote_sum_backward(&g, &c);
        let rhs: f64 = spread
            .iter()
            .zip(votes.p_hat.iter())
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum();
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn squash_output_norm_below_one(v in proptest::collection::vec(-50.0f32..50.0, 1..24)) {
            let arr = Array1::from_vec(v);
            let s = squash(arr.view());
            let out_norm: f64 = s.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            prop_assert!(out_norm < 1.0);
            let in_norm: f64 = arr.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            if in_norm > 1e-3 {
                // direction preserved: cosine similarity 1
                let dot: f64 = s.iter().zip(arr.iter()).map(|(&a, &b)| a as f64 * b as f64).sum();
                let cos = dot / (out_norm * in_norm);
                prop_assert!((cos - 1.0).abs() < 1e-6, "cos {}", cos);
            }
        }

        #[test]
        fn maxmin_range_and_affine_invariance(
            vals in proptest::collection::vec(-100.0f32..100.0, 20),
            alpha in 0.1f32..10.0,
            beta in -5.0f32..5.0,
        ) {
            let m = Array2::from_shape_vec((2, 10), vals).unwrap();
            let out = maxmin_normalize(m.view(), Axis(1), 0.0, 1.0);
            prop_assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let transformed = m.mapv(|v| alpha * v + beta);
            let out2 = maxmin_normalize(transformed.view(), Axis(1), 0.0, 1.0);
            for (x, y) in out.iter().zip(out2.iter()) {
                prop_assert!((x - y).abs() < 1e-5, "{} vs {}", x, y);
            }
        }

        #[test]
        fn one_routing_iteration_respects_bounds(seed in 0u64..500) {
            let (features, w, targets) = random_instance(seed, 5, 1);
            let out = route(&features, &w, shared_decoder(), &targets, 1, true, false);
            prop_assert!(out.coefficients.iter().all(|&v| (0.25..=1.0).contains(&v)));
        }
    }
}
