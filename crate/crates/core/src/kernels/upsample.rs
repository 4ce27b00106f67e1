//! Trilinear upsampling by an integer factor, align-corners off.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Source taps `(i0, i1, w0, w1)` for every output index along one axis.
fn axis_taps(len: usize, scale: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..len * scale)
        .map(|o| {
            let src = ((o as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

pub fn out_shape(shape: &[usize], scale: usize) -> Result<Vec<usize>> {
    let [n, c, d, h, w] = shape[..] else {
        return Err(Error::shape("trilinear_upsample", format!("input must be 5-d, got {shape:?}")));
    };
    if scale == 0 {
        return Err(Error::invalid("trilinear_upsample", "scale must be at least 1"));
    }
    if n * c * d * h * w == 0 {
        return Err(Error::shape("trilinear_upsample", format!("zero-extent input {shape:?}")));
    }
    Ok(vec![n, c, d * scale, h * scale, w * scale])
}

pub fn forward(input: &Tensor, scale: usize) -> Result<Tensor> {
    let out_dims = out_shape(input.shape(), scale)?;
    if scale == 1 {
        return Ok(input.clone());
    }
    let [n, c, d, h, w] = input.shape()[..] else { unreachable!() };
    let (td, th, tw) = (axis_taps(d, scale), axis_taps(h, scale), axis_taps(w, scale));
    let (od, oh, ow) = (d * scale, h * scale, w * scale);
    let mut out = Vec::with_capacity(n * c * od * oh * ow);
    for plane in input.data().chunks_exact(d * h * w) {
        for &(z0, z1, wz0, wz1) in &td {
            for &(y0, y1, wy0, wy1) in &th {
                let r00 = &plane[(z0 * h + y0) * w..][..w];
                let r01 = &plane[(z0 * h + y1) * w..][..w];
                let r10 = &plane[(z1 * h + y0) * w..][..w];
                let r11 = &plane[(z1 * h + y1) * w..][..w];
                for &(x0, x1, wx0, wx1) in &tw {
                    let lerp = |r: &[f64]| wx0 * r[x0] + wx1 * r[x1];
                    let v = wz0 * (wy0 * lerp(r00) + wy1 * lerp(r01))
                        + wz1 * (wy0 * lerp(r10) + wy1 * lerp(r11));
                    out.push(v);
                }
            }
        }
    }
    debug_assert_eq!(out.len(), n * c * od * oh * ow);
    Tensor::new(out_dims, out)
}

/// Transposed interpolation: scatters output gradients back onto source voxels.
pub fn backward(input_shape: &[usize], grad_out: &Tensor, scale: usize) -> Result<Tensor> {
    out_shape(input_shape, scale)?;
    if scale == 1 {
        return Ok(grad_out.clone());
    }
    let [_, _, d, h, w] = input_shape[..] else { unreachable!() };
    let (td, th, tw) = (axis_taps(d, scale), axis_taps(h, scale), axis_taps(w, scale));
    let out_plane = d * h * w * scale * scale * scale;
    let mut grad = vec![0.0; input_shape.iter().product()];
    for (plane, gplane) in grad.chunks_exact_mut(d * h * w).zip(grad_out.data().chunks_exact(out_plane)) {
        let mut g = gplane.iter();
        for &(z0, z1, wz0, wz1) in &td {
            for &(y0, y1, wy0, wy1) in &th {
                for &(x0, x1, wx0, wx1) in &tw {
                    let go = *g.next().expect("gradient length checked by shape");
                    for (z, wz) in [(z0, wz0), (z1, wz1)] {
                        for (y, wy) in [(y0, wy0), (y1, wy1)] {
                            let row = (z * h + y) * w;
                            plane[row + x0] += go * wz * wy * wx0;
                            plane[row + x1] += go * wz * wy * wx1;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_follow_half_pixel_centers() {
        let taps = axis_taps(4, 2);
        assert_eq!(taps[0], (0, 1, 1.0, 0.0));
        assert_eq!(taps[1], (0, 1, 0.75, 0.25));
        assert_eq!(taps[2], (0, 1, 0.25, 0.75));
        assert_eq!(taps[7], (3, 3, 0.75, 0.25));
    }

    #[test]
    fn rejects_zero_extent() {
        assert!(forward(&Tensor::zeros(&[1, 1, 0, 2, 2]), 2).is_err());
        assert!(forward(&Tensor::zeros(&[1, 1, 2, 2, 2]), 0).is_err());
    }
}
