//! 2-D convolution (im2col + GEMM), max pooling and adaptive average pooling.
//!
//! Batch elements are processed in parallel. Weight gradients are reduced
//! over fixed-size sample chunks in index order, so results do not depend on
//! the worker-thread count.

use ndarray::parallel::prelude::*;
use ndarray::{Array1, Array2, Array4, ArrayView3, Axis};
use rand::Rng;

use super::init;

/// Samples per gradient-reduction chunk; fixed so reductions are
/// order-stable across thread counts.
const GRAD_CHUNK: usize = 4;

/// Square-kernel convolution. Weights are stored GEMM-ready as
/// `(c_out, c_in * k * k)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Array2<f32>,
    pub b: Option<Array1<f32>>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct Conv2dGrad {
    pub w: Array2<f32>,
    pub b: Option<Array1<f32>>,
}

impl Conv2d {
    pub fn he<R: Rng>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = c_in * k * k;
        Conv2d {
            w: init::he_normal(rng, (c_out, fan_in), fan_in),
            b: bias.then(|| Array1::zeros(c_out)),
            c_in,
            c_out,
            k,
            stride,
            pad,
        }
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.as_ref().map_or(0, |b| b.len())
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.k) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.k) / self.stride + 1;
        (oh, ow)
    }

    /// `x: (batch, c_in, h, w)` -> `(batch, c_out, oh, ow)`.
    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        let (b, c_in, h, w) = x.dim();
        assert_eq!(c_in, self.c_in, "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let mut out = Array4::zeros((b, self.c_out, oh, ow));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(mut out_s, x_s)| {
                let cols = self.im2col(x_s, oh, ow);
                let mut y = self.w.dot(&cols);
                if let Some(bias) = &self.b {
                    y += &bias.view().insert_axis(Axis(1));
                }
                let y = y
                    .into_shape_with_order((self.c_out, oh, ow))
                    .expect("gemm output contiguous");
                out_s.assign(&y);
            });
        out
    }

    /// Returns parameter gradients and, when `need_gx`, the input gradient.
    pub fn backward(
        &self,
        x: &Array4<f32>,
        gy: &Array4<f32>,
        need_gx: bool,
    ) -> (Conv2dGrad, Option<Array4<f32>>) {
        let (b, _, h, w) = x.dim();
        let (_, _, oh, ow) = gy.dim();
        let mut gx = Array4::zeros((b, self.c_in, h, w));

        let partials: Vec<Conv2dGrad> = gx
            .axis_chunks_iter_mut(Axis(0), GRAD_CHUNK)
            .into_par_iter()
            .zip(x.axis_chunks_iter(Axis(0), GRAD_CHUNK).into_par_iter())
            .zip(gy.axis_chunks_iter(Axis(0), GRAD_CHUNK).into_par_iter())
            .map(|((mut gx_c, x_c), gy_c)| {
                let mut gw = Array2::zeros(self.w.dim());
                let mut gb = self.b.as_ref().map(|bv| Array1::zeros(bv.len()));
                for s in 0..x_c.dim().0 {
                    let x_s = x_c.index_axis(Axis(0), s);
                    let gy_s = gy_c.index_axis(Axis(0), s);
                    let gy_mat = gy_s
                        .to_shape((self.c_out, oh * ow))
                        .expect("gy sample contiguous");
                    let cols = self.im2col(x_s, oh, ow);
                    gw += &gy_mat.dot(&cols.t());
                    if let Some(gb) = gb.as_mut() {
                        *gb += &gy_mat.sum_axis(Axis(1));
                    }
                    if need_gx {
                        let gcols = self.w.t().dot(&gy_mat);
                        self.col2im(&gcols, gx_c.index_axis_mut(Axis(0), s), oh, ow);
                    }
                }
                Conv2dGrad { w: gw, b: gb }
            })
            .collect();

        let mut total = Conv2dGrad {
            w: Array2::zeros(self.w.dim()),
            b: self.b.as_ref().map(|bv| Array1::zeros(bv.len())),
        };
        for p in &partials {
            total.add_assign(p);
        }
        (total, need_gx.then_some(gx))
    }

    /// Lays out every receptive field of one sample as a column:
    /// `(c_in * k * k, oh * ow)`.
    fn im2col(&self, x: ArrayView3<'_, f32>, oh: usize, ow: usize) -> Array2<f32> {
        let (c_in, h, w) = x.dim();
        let k = self.k;
        let s = self.stride;
        let pad = self.pad as isize;
        let mut cols = Array2::zeros((c_in * k * k, oh * ow));
        for c in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let mut cols_row = cols.row_mut(row);
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let (ox_min, ox_max) = valid_ox(kx as isize - pad, s, w, ow);
                        for ox in ox_min..ox_max {
                            let ix = ((ox * s) as isize + kx as isize - pad) as usize;
                            cols_row[oy * ow + ox] = x[[c, iy as usize, ix]];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-adds column gradients back onto the input sample.
    fn col2im(
        &self,
        gcols: &Array2<f32>,
        mut gx: ndarray::ArrayViewMut3<'_, f32>,
        oh: usize,
        ow: usize,
    ) {
        let (c_in, h, w) = gx.dim();
        let k = self.k;
        let s = self.stride;
        let pad = self.pad as isize;
        for c in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let grow = gcols.row(row);
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let (ox_min, ox_max) = valid_ox(kx as isize - pad, s, w, ow);
                        for ox in ox_min..ox_max {
                            let ix = ((ox * s) as isize + kx as isize - pad) as usize;
                            gx[[c, iy as usize, ix]] += grow[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output-x range whose input column `ox * s + offset` stays inside `[0, w)`.
fn valid_ox(offset: isize, s: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(s)
    };
    let hi_incl = (w as isize - 1 - offset) / s as isize;
    if hi_incl < lo as isize {
        return (0, 0);
    }
    (lo, ((hi_incl as usize) + 1).min(ow))
}

impl Conv2dGrad {
    pub fn add_assign(&mut self, other: &Conv2dGrad) {
        self.w += &other.w;
        if let (Some(b), Some(ob)) = (self.b.as_mut(), other.b.as_ref()) {
            *b += ob;
        }
    }
}

/// 2x2 max pooling with stride 2. Forward records the argmax corner of each
/// window (ties broken toward the first scanned position).
#[derive(Debug, Clone, Copy)]
pub struct MaxPool2;

impl MaxPool2 {
    pub fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, Array4<u8>) {
        let (b, c, h, w) = x.dim();
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Array4::zeros((b, c, oh, ow));
        let mut arg = Array4::zeros((b, c, oh, ow));
        for s in 0..b {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_i = 0u8;
                        for dy in 0..2usize {
                            for dx in 0..2usize {
                                let v = x[[s, ch, oy * 2 + dy, ox * 2 + dx]];
                                if v > best {
                                    best = v;
                                    best_i = (dy * 2 + dx) as u8;
                                }
                            }
                        }
                        y[[s, ch, oy, ox]] = best;
                        arg[[s, ch, oy, ox]] = best_i;
                    }
                }
            }
        }
        (y, arg)
    }

    pub fn backward(
        &self,
        arg: &Array4<u8>,
        gy: &Array4<f32>,
        in_hw: (usize, usize),
    ) -> Array4<f32> {
        let (b, c, _, _) = gy.dim();
        let mut gx = Array4::zeros((b, c, in_hw.0, in_hw.1));
        for ((s, ch, oy, ox), &g) in gy.indexed_iter() {
            let a = arg[[s, ch, oy, ox]] as usize;
            let (dy, dx) = (a / 2, a % 2);
            gx[[s, ch, oy * 2 + dy, ox * 2 + dx]] += g;
        }
        gx
    }
}

/// Average pooling onto a fixed output grid; window edges follow
/// `floor(i*h/oh) .. ceil((i+1)*h/oh)` so any input size maps cleanly.
#[derive(Debug, Clone, Copy)]
pub struct AdaptiveAvgPool {
    pub out_h: usize,
    pub out_w: usize,
}

impl AdaptiveAvgPool {
    fn bounds(i: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        (i * n_in / n_out, ((i + 1) * n_in).div_ceil(n_out))
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        let (b, c, h, w) = x.dim();
        let mut y = Array4::zeros((b, c, self.out_h, self.out_w));
        for ((s, ch, oy, ox), yv) in y.indexed_iter_mut() {
            let (y0, y1) = Self::bounds(oy, h, self.out_h);
            let (x0, x1) = Self::bounds(ox, w, self.out_w);
            let mut acc = 0.0f32;
            for iy in y0..y1 {
                for ix in x0..x1 {
                    acc += x[[s, ch, iy, ix]];
                }
            }
            *yv = acc / ((y1 - y0) * (x1 - x0)) as f32;
        }
        y
    }

    pub fn backward(&self, gy: &Array4<f32>, in_hw: (usize, usize)) -> Array4<f32> {
        let (b, c, _, _) = gy.dim();
        let (h, w) = in_hw;
        let mut gx = Array4::zeros((b, c, h, w));
        for ((s, ch, oy, ox), &g) in gy.indexed_iter() {
            let (y0, y1) = Self::bounds(oy, h, self.out_h);
            let (x0, x1) = Self::bounds(ox, w, self.out_w);
            let share = g / ((y1 - y0) * (x1 - x0)) as f32;
            for iy in y0..y1 {
                for ix in x0..x1 {
                    gx[[s, ch, iy, ix]] += share;
                }
            }
        }
        gx
    }
}
