//! im2col + GEMM cross-correlation over three spatial axes.
//!
//! 2D convolution is the same kernel with a unit depth axis.

use super::gemm::{gemm, MatRef};
use super::Element;
use crate::error::{Error, Result};
use crate::parallel::{for_each_chunk_mut, map_indexed, SAMPLE_CHUNK};

/// Shape bookkeeping for one 3D cross-correlation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub pad: [usize; 3],
    pub stride: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    /// Validates `input` = N×Cin×D×H×W against `kernel` = Cout×Cin×kD×kH×kW.
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        pad: [usize; 3],
        stride: [usize; 3],
    ) -> Result<Self> {
        if input.len() != 5 || kernel.len() != 5 || input[1] != kernel[1] {
            return Err(Error::shape("conv3d", input, kernel));
        }
        if stride.contains(&0) {
            return Err(Error::contract("conv stride must be at least 1"));
        }
        let mut output = [0; 3];
        for ax in 0..3 {
            let padded = input[ax + 2] + 2 * pad[ax];
            let k = kernel[ax + 2];
            if k > padded || !(padded - k).is_multiple_of(stride[ax]) {
                return Err(Error::shape("conv3d output extent", input, kernel));
            }
            output[ax] = (padded - k) / stride[ax] + 1;
        }
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            out_channels: kernel[0],
            input: [input[2], input[3], input[4]],
            kernel: [kernel[2], kernel[3], kernel[4]],
            pad,
            stride,
            output,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.out_channels,
            self.output[0],
            self.output[1],
            self.output[2],
        ]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    fn positions(&self) -> usize {
        self.output.iter().product()
    }

    fn sample_in(&self) -> usize {
        self.in_channels * self.input.iter().product::<usize>()
    }

    fn sample_out(&self) -> usize {
        self.out_channels * self.positions()
    }

    /// Multiply-accumulates per sample for the forward pass.
    pub fn macs_per_sample(&self) -> usize {
        self.sample_out() * self.patch_len()
    }
}

/// Output range `[lo, hi)` along one axis whose taps at kernel offset `k` land inside the input.
#[inline]
fn valid_range(k: usize, stride: usize, pad: usize, extent: usize, out: usize) -> (usize, usize) {
    // o·stride + k − pad ∈ [0, extent)
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if extent + pad > k {
        ((extent + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Visits every in-bounds (column-matrix offset, input offset) pair of one sample.
///
/// With unit stride along the last axis, `run` receives contiguous runs
/// `(dst, src, len)`; otherwise it is called once per element with `len == 1`.
#[inline]
fn for_each_run(g: &ConvGeometry, mut run: impl FnMut(usize, usize, usize)) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.in_channels {
        for a in 0..kd {
            let (z0, z1) = valid_range(a, sd, pd, d, od);
            for b in 0..kh {
                let (y0, y1) = valid_range(b, sh, ph, h, oh);
                for e in 0..kw {
                    let (x0, x1) = valid_range(e, sw, pw, w, ow);
                    let base_row = row * p;
                    row += 1;
                    if x0 >= x1 {
                        continue;
                    }
                    for z in z0..z1 {
                        let iz = z * sd + a - pd;
                        for y in y0..y1 {
                            let iy = y * sh + b - ph;
                            let src = ((c * d + iz) * h + iy) * w;
                            let dst = base_row + (z * oh + y) * ow;
                            if sw == 1 {
                                run(dst + x0, src + x0 + e - pw, x1 - x0);
                            } else {
                                for x in x0..x1 {
                                    run(dst + x, src + x * sw + e - pw, 1);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Element>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    cols.iter_mut().for_each(|v| *v = T::zero());
    for_each_run(g, |dst, src, n| cols[dst..dst + n].copy_from_slice(&x[src..src + n]));
}

fn col2im<T: Element>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    for_each_run(g, |dst, src, n| {
        for (o, &v) in dx[src..src + n].iter_mut().zip(&cols[dst..dst + n]) {
            *o += v;
        }
    });
}

pub(crate) fn forward<T: Element>(g: &ConvGeometry, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
    let (k, p) = (g.patch_len(), g.positions());
    let mut out = vec![T::zero(); g.batch * g.sample_out()];
    for_each_chunk_mut(&mut out, g.sample_out(), |n, out_n| {
        let mut cols = vec![T::zero(); k * p];
        im2col(g, &x[n * g.sample_in()..(n + 1) * g.sample_in()], &mut cols);
        for (c, row) in out_n.chunks_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[c]);
        }
        gemm(
            T::one(),
            MatRef::rm(w, g.out_channels, k),
            MatRef::rm(&cols, k, p),
            T::one(),
            out_n,
        );
    });
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn backward<T: Element>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    gout: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let (k, p) = (g.patch_len(), g.positions());
    let [need_x, need_w, need_b] = need;

    let input = need_x.then(|| {
        let mut dx = vec![T::zero(); x.len()];
        for_each_chunk_mut(&mut dx, g.sample_in(), |n, dx_n| {
            let mut dcols = vec![T::zero(); k * p];
            gemm(
                T::one(),
                MatRef::rm_t(w, k, g.out_channels),
                MatRef::rm(&gout[n * g.sample_out()..(n + 1) * g.sample_out()], g.out_channels, p),
                T::zero(),
                &mut dcols,
            );
            col2im(g, &dcols, dx_n);
        });
        dx
    });

    let weight = need_w.then(|| {
        let chunks = g.batch.div_ceil(SAMPLE_CHUNK);
        let partials = map_indexed(chunks, |ci| {
            let mut dw = vec![T::zero(); w.len()];
            let mut cols = vec![T::zero(); k * p];
            let end = ((ci + 1) * SAMPLE_CHUNK).min(g.batch);
            for n in ci * SAMPLE_CHUNK..end {
                im2col(g, &x[n * g.sample_in()..(n + 1) * g.sample_in()], &mut cols);
                gemm(
                    T::one(),
                    MatRef::rm(&gout[n * g.sample_out()..(n + 1) * g.sample_out()], g.out_channels, p),
                    MatRef::rm_t(&cols, p, k),
                    T::one(),
                    &mut dw,
                );
            }
            dw
        });
        let mut dw = vec![T::zero(); w.len()];
        for part in &partials {
            dw.iter_mut().zip(part).for_each(|(a, &b)| *a += b);
        }
        dw
    });

    let bias = need_b.then(|| {
        let mut db = vec![T::zero(); g.out_channels];
        for sample in gout.chunks(g.sample_out()) {
            for (c, row) in sample.chunks(p).enumerate() {
                db[c] += row.iter().copied().sum::<T>();
            }
        }
        db
    });

    ConvGrads {
        input,
        weight,
        bias,
    }
}
