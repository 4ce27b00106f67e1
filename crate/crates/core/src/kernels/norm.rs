//! Group normalization over `[N, C, D, H, W]` with per-channel affine.

use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, pairwise_sum_by, Tensor};

/// Per-(sample, group) statistics saved for the backward pass.
#[derive(Clone, Debug)]
pub struct GroupStats {
    pub groups: usize,
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn validate(shape: &[usize], groups: usize, gamma: &[usize], beta: &[usize]) -> Result<()> {
    let [_, c, _, _, _] = shape[..] else {
        return Err(Error::shape("group_norm", format!("input must be 5-d, got {shape:?}")));
    };
    if groups == 0 || c % groups != 0 {
        return Err(Error::invalid(
            "group_norm",
            format!("{c} channels are not divisible into {groups} groups"),
        ));
    }
    if gamma != [c] || beta != [c] {
        return Err(Error::shape(
            "group_norm",
            format!("affine shapes {gamma:?}/{beta:?} do not match {c} channels"),
        ));
    }
    Ok(())
}

pub fn forward(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, GroupStats)> {
    validate(x.shape(), groups, gamma.shape(), beta.shape())?;
    let [n, c, d, h, w] = x.shape()[..] else { unreachable!() };
    let spatial = d * h * w;
    let group_len = c / groups * spatial;
    let mut out = vec![0.0; x.numel()];
    let mut mean = Vec::with_capacity(n * groups);
    let mut rstd = Vec::with_capacity(n * groups);
    for (gi, (xs, ys)) in x.data().chunks_exact(group_len).zip(out.chunks_exact_mut(group_len)).enumerate() {
        let mu = pairwise_sum(xs) / group_len as f64;
        let var = pairwise_sum_by(group_len, &|i| (xs[i] - mu) * (xs[i] - mu)) / group_len as f64;
        let r = 1.0 / (var + eps).sqrt();
        let first_channel = (gi % groups) * (c / groups);
        for (j, (xc, yc)) in xs.chunks_exact(spatial).zip(ys.chunks_exact_mut(spatial)).enumerate() {
            let (g, b) = (gamma.data()[first_channel + j], beta.data()[first_channel + j]);
            for (xv, yv) in xc.iter().zip(yc.iter_mut()) {
                *yv = g * (xv - mu) * r + b;
            }
        }
        mean.push(mu);
        rstd.push(r);
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, GroupStats { groups, mean, rstd }))
}

pub struct NormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn backward(x: &Tensor, gamma: &Tensor, stats: &GroupStats, grad_out: &Tensor) -> Result<NormGrads> {
    let [n, c, d, h, w] = x.shape()[..] else { unreachable!() };
    let groups = stats.groups;
    let spatial = d * h * w;
    let per_group = c / groups;
    let group_len = per_group * spatial;
    let mut gx = vec![0.0; x.numel()];
    // Per-(sample, channel) partial sums, reduced over the batch afterwards.
    let mut dgamma_parts = vec![0.0; n * c];
    let mut dbeta_parts = vec![0.0; n * c];

    for gi in 0..n * groups {
        let (mu, r) = (stats.mean[gi], stats.rstd[gi]);
        let xs = &x.data()[gi * group_len..(gi + 1) * group_len];
        let gs = &grad_out.data()[gi * group_len..(gi + 1) * group_len];
        let first_channel = (gi % groups) * per_group;
        let sample = gi / groups;
        let xhat = |i: usize| (xs[i] - mu) * r;
        let gamma_at = |i: usize| gamma.data()[first_channel + i / spatial];
        for j in 0..per_group {
            let base = j * spatial;
            let ch = sample * c + first_channel + j;
            dgamma_parts[ch] = pairwise_sum_by(spatial, &|i| gs[base + i] * xhat(base + i));
            dbeta_parts[ch] = pairwise_sum(&gs[base..base + spatial]);
        }
        let mean_dxhat = pairwise_sum_by(group_len, &|i| gs[i] * gamma_at(i)) / group_len as f64;
        let mean_dxhat_xhat = pairwise_sum_by(group_len, &|i| gs[i] * gamma_at(i) * xhat(i)) / group_len as f64;
        let out = &mut gx[gi * group_len..(gi + 1) * group_len];
        for (i, o) in out.iter_mut().enumerate() {
            *o = r * (gs[i] * gamma_at(i) - mean_dxhat - xhat(i) * mean_dxhat_xhat);
        }
    }
    let reduce = |parts: &[f64]| -> Vec<f64> {
        (0..c).map(|ch| pairwise_sum_by(n, &|s| parts[s * c + ch])).collect()
    };
    Ok(NormGrads {
        input: Tensor::new(x.shape().to_vec(), gx)?,
        gamma: Tensor::new(vec![c], reduce(&dgamma_parts))?,
        beta: Tensor::new(vec![c], reduce(&dbeta_parts))?,
    })
}
