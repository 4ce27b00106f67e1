//! 3-d cross-correlation via tiled im2col and GEMM.
//!
//! Output columns are processed in tiles of whole `(z, y)` output rows so the
//! column buffer stays cache-sized. Every accumulation runs in a fixed order,
//! so results are bit-identical across runs.

use crate::error::{Error, Result};
use crate::kernels::gemm::{gemm, MatRef};
use crate::tensor::Tensor;

/// Target number of output columns per im2col tile.
const TILE_COLUMNS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_extent: [usize; 3],
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: usize,
    pub padding: usize,
    pub out_extent: [usize; 3],
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let [n, c, d, h, w] = input[..] else {
            return Err(Error::shape("conv3d", format!("input must be 5-d, got {input:?}")));
        };
        let [k, wc, kd, kh, kw] = weight[..] else {
            return Err(Error::shape("conv3d", format!("weight must be 5-d, got {weight:?}")));
        };
        if wc != c {
            return Err(Error::shape(
                "conv3d",
                format!("input has {c} channels but weight expects {wc}"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv3d", "stride must be positive"));
        }
        let extent = |x: usize, k: usize| -> Result<usize> {
            if k == 0 || x + 2 * padding < k {
                return Err(Error::shape(
                    "conv3d",
                    format!("non-positive output extent for input {x}, kernel {k}, padding {padding}"),
                ));
            }
            Ok((x + 2 * padding - k) / stride + 1)
        };
        let out_extent = [extent(d, kd)?, extent(h, kh)?, extent(w, kw)?];
        Ok(Self {
            batch: n,
            in_channels: c,
            in_extent: [d, h, w],
            out_channels: k,
            kernel: [kd, kh, kw],
            stride,
            padding,
            out_extent,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        let [od, oh, ow] = self.out_extent;
        vec![self.batch, self.out_channels, od, oh, ow]
    }

    fn in_spatial(&self) -> usize {
        self.in_extent.iter().product()
    }

    fn out_spatial(&self) -> usize {
        self.out_extent.iter().product()
    }

    /// Rows of the im2col matrix: `C * kd * kh * kw`.
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    /// Stride-1 convolutions with a cubic kernel no smaller than the
    /// padding admit an input gradient that is itself a forward correlation.
    fn transposable(&self) -> bool {
        let [kd, kh, kw] = self.kernel;
        self.stride == 1 && kd == kh && kh == kw && kd > self.padding
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == 1 && self.padding == 0
    }

    /// Output-row tiles as `(first_row, row_count)` over the flattened `(z, y)` index.
    fn tiles(&self) -> impl Iterator<Item = (usize, usize)> {
        let [od, oh, ow] = self.out_extent;
        let rows = od * oh;
        let per_tile = (TILE_COLUMNS / ow.max(1)).max(1);
        (0..rows)
            .step_by(per_tile)
            .map(move |start| (start, per_tile.min(rows - start)))
    }
}

/// For output x in `0..ow` at kernel offset `e`, the valid range of x and the
/// input index of the first valid x.
#[inline]
fn valid_x_range(ow: usize, w: usize, e: usize, stride: usize, padding: usize) -> (usize, usize) {
    // ix = x*stride + e - padding must lie in [0, w).
    let lo = if e >= padding {
        0
    } else {
        (padding - e).div_ceil(stride)
    };
    let hi = if w + padding <= e {
        0
    } else {
        ((w + padding - e - 1) / stride + 1).min(ow)
    };
    (lo, hi.max(lo))
}

/// Fills `col` (row-major `patch_len x cols`) for the given tile of one sample.
fn im2col(geo: &ConvGeometry, sample: &[f64], first_row: usize, row_count: usize, col: &mut [f64]) {
    let [d, h, w] = geo.in_extent;
    let [_, oh, ow] = geo.out_extent;
    let [kd, kh, kw] = geo.kernel;
    let (s, p) = (geo.stride, geo.padding);
    let cols = row_count * ow;
    let mut row = 0;
    for c in 0..geo.in_channels {
        let channel = &sample[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    let (xlo, xhi) = valid_x_range(ow, w, e, s, p);
                    for t in 0..row_count {
                        let zy = first_row + t;
                        let (z, y) = (zy / oh, zy % oh);
                        let seg = &mut dst[t * ow..(t + 1) * ow];
                        let iz = (z * s + a) as isize - p as isize;
                        let iy = (y * s + b) as isize - p as isize;
                        if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                            seg.fill(0.0);
                            continue;
                        }
                        let src = &channel[(iz as usize * h + iy as usize) * w..][..w];
                        seg[..xlo].fill(0.0);
                        seg[xhi..].fill(0.0);
                        if s == 1 {
                            let ix0 = xlo + e - p;
                            seg[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                        } else {
                            for x in xlo..xhi {
                                seg[x] = src[x * s + e - p];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds `col` back into one sample's input gradient.
fn col2im(geo: &ConvGeometry, col: &[f64], first_row: usize, row_count: usize, sample: &mut [f64]) {
    let [d, h, w] = geo.in_extent;
    let [_, oh, ow] = geo.out_extent;
    let [kd, kh, kw] = geo.kernel;
    let (s, p) = (geo.stride, geo.padding);
    let cols = row_count * ow;
    let mut row = 0;
    for c in 0..geo.in_channels {
        let channel = &mut sample[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &col[row * cols..(row + 1) * cols];
                    let (xlo, xhi) = valid_x_range(ow, w, e, s, p);
                    for t in 0..row_count {
                        let zy = first_row + t;
                        let (z, y) = (zy / oh, zy % oh);
                        let iz = (z * s + a) as isize - p as isize;
                        let iy = (y * s + b) as isize - p as isize;
                        if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let seg = &src[t * ow..(t + 1) * ow];
                        let dst = &mut channel[(iz as usize * h + iy as usize) * w..][..w];
                        for x in xlo..xhi {
                            dst[x * s + e - p] += seg[x];
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub fn forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, geo: &ConvGeometry) -> Result<Tensor> {
    if let Some(b) = bias {
        if b.shape() != [geo.out_channels] {
            return Err(Error::shape(
                "conv3d",
                format!("bias shape {:?} does not match {} output channels", b.shape(), geo.out_channels),
            ));
        }
    }
    let k = geo.out_channels;
    let patch = geo.patch_len();
    let in_len = geo.in_channels * geo.in_spatial();
    let out_spatial = geo.out_spatial();
    let ow = geo.out_extent[2];
    let mut out = vec![0.0; geo.batch * k * out_spatial];
    let wmat = MatRef::row_major(weight.data(), k, patch);
    let mut col = Vec::new();

    for n in 0..geo.batch {
        let sample = &input.data()[n * in_len..(n + 1) * in_len];
        let out_n = &mut out[n * k * out_spatial..(n + 1) * k * out_spatial];
        if let Some(b) = bias {
            for (ch, &bv) in b.data().iter().enumerate() {
                out_n[ch * out_spatial..(ch + 1) * out_spatial].fill(bv);
            }
        }
        if geo.is_pointwise() {
            let x = MatRef::row_major(sample, geo.in_channels, out_spatial);
            gemm(wmat, x, 1.0, out_n, out_spatial);
            continue;
        }
        for (first_row, row_count) in geo.tiles() {
            let cols = row_count * ow;
            col.resize(patch * cols, 0.0);
            im2col(geo, sample, first_row, row_count, &mut col);
            let offset = first_row * ow;
            gemm(
                wmat,
                MatRef::row_major(&col, patch, cols),
                1.0,
                &mut out_n[offset..],
                out_spatial,
            );
        }
    }
    Tensor::new(geo.out_shape(), out)
}

/// Gradients requested from [`backward`].
#[derive(Clone, Copy, Debug)]
pub struct ConvGradRequest {
    pub input: bool,
    pub weight: bool,
    pub bias: bool,
}

#[derive(Debug, Default)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    geo: &ConvGeometry,
    want: ConvGradRequest,
) -> Result<ConvGrads> {
    let k = geo.out_channels;
    let patch = geo.patch_len();
    let in_len = geo.in_channels * geo.in_spatial();
    let out_spatial = geo.out_spatial();
    let ow = geo.out_extent[2];
    let via_transpose = want.input && geo.transposable() && !geo.is_pointwise();
    let mut grad_input = (want.input && !via_transpose).then(|| vec![0.0; input.numel()]);
    let mut grad_weight = want.weight.then(|| vec![0.0; weight.numel()]);
    let wt = MatRef::transposed(weight.data(), k, patch);
    let mut col = Vec::new();
    let mut dcol = Vec::new();

    for n in 0..geo.batch {
        let sample = &input.data()[n * in_len..(n + 1) * in_len];
        let gout = &grad_out.data()[n * k * out_spatial..(n + 1) * k * out_spatial];
        if geo.is_pointwise() {
            let gmat = MatRef::row_major(gout, k, out_spatial);
            if let Some(gw) = grad_weight.as_mut() {
                let xt = MatRef::transposed(sample, geo.in_channels, out_spatial);
                gemm(gmat, xt, 1.0, gw, patch);
            }
            if let Some(gi) = grad_input.as_mut() {
                gemm(wt, gmat, 0.0, &mut gi[n * in_len..(n + 1) * in_len], out_spatial);
            }
            continue;
        }
        for (first_row, row_count) in geo.tiles() {
            let cols = row_count * ow;
            let offset = first_row * ow;
            let gtile = MatRef {
                data: &gout[offset..],
                rows: k,
                cols,
                row_stride: out_spatial,
                col_stride: 1,
            };
            if let Some(gw) = grad_weight.as_mut() {
                col.resize(patch * cols, 0.0);
                im2col(geo, sample, first_row, row_count, &mut col);
                gemm(gtile, MatRef::transposed(&col, patch, cols), 1.0, gw, patch);
            }
            if let Some(gi) = grad_input.as_mut() {
                dcol.resize(patch * cols, 0.0);
                gemm(wt, gtile, 0.0, &mut dcol, cols);
                col2im(geo, &dcol, first_row, row_count, &mut gi[n * in_len..(n + 1) * in_len]);
            }
        }
    }

    let grad_bias = want.bias.then(|| {
        let data = (0..k)
            .map(|ch| {
                crate::tensor::pairwise_sum_by(geo.batch, &|n| {
                    crate::tensor::pairwise_sum(
                        &grad_out.data()[(n * k + ch) * out_spatial..(n * k + ch + 1) * out_spatial],
                    )
                })
            })
            .collect();
        Tensor::new(vec![k], data)
    });

    let input_grad = if via_transpose {
        let flipped = flip_transpose(weight, geo)?;
        let tgeo = ConvGeometry::new(grad_out.shape(), flipped.shape(), 1, geo.kernel[0] - 1 - geo.padding)?;
        Some(forward(grad_out, &flipped, None, &tgeo)?)
    } else {
        grad_input.map(|g| Tensor::new(input.shape().to_vec(), g)).transpose()?
    };

    Ok(ConvGrads {
        input: input_grad,
        weight: grad_weight.map(|g| Tensor::new(weight.shape().to_vec(), g)).transpose()?,
        bias: grad_bias.transpose()?,
    })
}

/// `[K, C, a, b, e]` weights to `[C, K, -a, -b, -e]`.
fn flip_transpose(weight: &Tensor, geo: &ConvGeometry) -> Result<Tensor> {
    let (k, c) = (geo.out_channels, geo.in_channels);
    let [kd, kh, kw] = geo.kernel;
    let taps = kd * kh * kw;
    let mut out = vec![0.0; weight.numel()];
    for o in 0..k {
        for i in 0..c {
            let src = &weight.data()[(o * c + i) * taps..(o * c + i + 1) * taps];
            let dst = &mut out[(i * k + o) * taps..(i * k + o + 1) * taps];
            for (t, v) in src.iter().enumerate() {
                dst[taps - 1 - t] = *v;
            }
        }
    }
    Tensor::new(vec![c, k, kd, kh, kw], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for w in 1..6 {
            for ow in 1..7 {
                for e in 0..3 {
                    for s in 1..3 {
                        for p in 0..3 {
                            let (lo, hi) = valid_x_range(ow, w, e, s, p);
                            for x in 0..ow {
                                let ix = (x * s + e) as isize - p as isize;
                                let valid = ix >= 0 && ix < w as isize;
                                assert_eq!(valid, x >= lo && x < hi, "w={w} ow={ow} e={e} s={s} p={p} x={x}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch_and_empty_output() {
        assert!(ConvGeometry::new(&[1, 2, 4, 4, 4], &[1, 3, 1, 1, 1], 1, 0).is_err());
        assert!(ConvGeometry::new(&[1, 1, 2, 2, 2], &[1, 1, 3, 3, 3], 1, 0).is_err());
        assert!(ConvGeometry::new(&[1, 1, 2, 2, 2], &[1, 1, 3, 3, 3], 1, 1).is_ok());
    }

    #[test]
    fn tiles_cover_all_rows_once() {
        let geo = ConvGeometry::new(&[1, 1, 40, 40, 40], &[1, 1, 3, 3, 3], 1, 1).unwrap();
        let mut next = 0;
        for (start, count) in geo.tiles() {
            assert_eq!(start, next);
            next += count;
        }
        assert_eq!(next, 40 * 40);
    }
}
