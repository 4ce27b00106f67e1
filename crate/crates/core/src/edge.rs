//! 3-d Sobel responses, edge ground truth, and the straight-through boundary
//! field used by the consistency loss.
//!
//! Kernels are raw integers: derivative `[-1, 0, 1]` along one axis times
//! smoothing `[1, 2, 1]` along the other two, so a unit ramp responds with 32.
//! Volumes are zero-padded, which makes faces touching a non-zero field
//! respond as well; for labels this means the outside is background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::tape::{channel_layout, BackwardRule, Tape, Var};
use crate::tensor::{pairwise_sum_by, Tensor};

/// Magnitude threshold above which a voxel counts as an edge.
pub const EDGE_THRESHOLD: f64 = 1e-6;

/// Stabilizer under the square root of boundary magnitudes in losses.
pub const MAGNITUDE_EPS: f64 = 1e-12;

/// Stabilizer used when extracting binary edges; `sqrt` of it stays far below
/// [`EDGE_THRESHOLD`].
const EXTRACTION_EPS: f64 = 1e-24;

const SMOOTH: [f64; 3] = [1.0, 2.0, 1.0];
const DERIV: [f64; 3] = [-1.0, 0.0, 1.0];

/// The three Sobel kernels as a `[3, 1, 3, 3, 3]` conv weight; output channel
/// `a` differentiates along spatial axis `a` (depth, height, width).
pub fn sobel_kernels() -> Tensor {
    Tensor::from_fn(&[3, 1, 3, 3, 3], |idx| {
        let axis = idx / 27;
        let ijk = [(idx / 9) % 3, (idx / 3) % 3, idx % 3];
        (0..3)
            .map(|a| if a == axis { DERIV[ijk[a]] } else { SMOOTH[ijk[a]] })
            .product()
    })
}

/// Per-axis Sobel responses `[N, 3, D, H, W]` of a single-channel volume.
pub fn sobel3d(tape: &mut Tape, volume: Var) -> Result<Var> {
    let dims = tape.value(volume).dims5("sobel3d")?;
    if dims.c != 1 {
        return Err(Error::shape("sobel3d", format!("expected one channel, got {}", dims.c)));
    }
    let kernels = tape.constant(sobel_kernels())?;
    tape.conv3d(volume, kernels, None, 1, 1)
}

/// `sqrt(gx^2 + gy^2 + gz^2 + eps)` over the response channels.
pub fn gradient_magnitude(tape: &mut Tape, responses: Var, eps: f64) -> Result<Var> {
    let dims = tape.value(responses).dims5("gradient_magnitude")?;
    if dims.c != 3 {
        return Err(Error::shape("gradient_magnitude", format!("expected 3 channels, got {}", dims.c)));
    }
    if eps <= 0.0 {
        return Err(Error::invalid("gradient_magnitude", "eps must be positive"));
    }
    let sq = tape.square(responses)?;
    let summed = tape.sum_axes(sq, &[1])?;
    let summed = tape.reshape(summed, &[dims.n, 1, dims.d, dims.h, dims.w])?;
    let shifted = tape.add_scalar(summed, eps)?;
    tape.sqrt(shifted)
}

/// Binary boundary volume `[N, 1, D, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeMap {
    dims: [usize; 4],
    data: Vec<u8>,
}

impl EdgeMap {
    pub fn new(dims: [usize; 4], data: Vec<u8>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() || data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("edge_map", "dims/data mismatch or non-binary values"));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        let [n, d, h, w] = self.dims;
        Tensor::new(vec![n, 1, d, h, w], self.data.iter().map(|&v| v as f64).collect())
            .expect("shape matches voxel count")
    }
}

/// Union over classes of voxels where the one-hot class indicator has a
/// non-zero Sobel magnitude.
///
/// Voxels outside the volume count as background, so only non-background
/// classes touching a face make it respond.
pub fn edges_from_labels(labels: &LabelVolume, num_classes: usize) -> Result<EdgeMap> {
    labels.check_range(num_classes)?;
    let [n, d, h, w] = labels.dims();
    let mut one_hot = labels.one_hot(num_classes)?;
    // The background indicator padded with ones equals one minus the
    // foreground indicator padded with zeros; both have the same magnitude.
    let spatial = d * h * w;
    for s in 0..n {
        let plane = &mut one_hot.data_mut()[s * num_classes * spatial..(s * num_classes + 1) * spatial];
        for v in plane.iter_mut() {
            *v = 1.0 - *v;
        }
    }
    let one_hot = one_hot.reshape(&[n * num_classes, 1, d, h, w])?;
    let mut tape = Tape::new();
    let x = tape.constant(one_hot)?;
    let responses = sobel3d(&mut tape, x)?;
    let mag = gradient_magnitude(&mut tape, responses, EXTRACTION_EPS)?;
    let mag = tape.value(mag).data();
    let mut data = vec![0u8; n * spatial];
    for s in 0..n {
        for k in 0..num_classes {
            let plane = &mag[(s * num_classes + k) * spatial..(s * num_classes + k + 1) * spatial];
            for (v, &m) in plane.iter().enumerate() {
                if m > EDGE_THRESHOLD {
                    data[s * spatial + v] = 1;
                }
            }
        }
    }
    EdgeMap::new(labels.dims(), data)
}

/// Sobel magnitude of the class-index field of `labels`, `[N, 1, D, H, W]`.
pub fn label_boundary(tape: &mut Tape, labels: &LabelVolume) -> Result<Var> {
    let field = tape.constant(labels.as_field())?;
    let responses = sobel3d(tape, field)?;
    gradient_magnitude(tape, responses, MAGNITUDE_EPS)
}

/// How [`soft_boundary`] turns probabilities into a class selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BoundaryMode {
    /// Hard argmax of the probabilities.
    Deterministic,
    /// Hard argmax of `log p + g`, `g` standard Gumbel noise drawn from `seed`.
    Stochastic { seed: u64 },
    /// Forward pass uses the tempered softmax itself instead of the hard
    /// one-hot. Its exact gradient equals the straight-through gradient, which
    /// makes it the finite-difference reference for that estimator.
    Softened,
}

/// Standard Gumbel(0, 1) samples, `-ln(-ln u)` with `u` uniform in (0, 1).
pub fn gumbel_noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Straight-through backward rule: the Jacobian of
/// `softmax((log p + g) / tau)` with respect to `p`.
struct TemperedSoftmaxRule {
    tau: f64,
    noise: Option<Vec<f64>>,
}

impl TemperedSoftmaxRule {
    fn soft(&self, probs: &Tensor) -> Tensor {
        tempered_softmax(probs, self.tau, self.noise.as_deref())
    }
}

/// `softmax((log p + g) / tau)` over channels; zero-probability channels stay zero.
pub fn tempered_softmax(probs: &Tensor, tau: f64, noise: Option<&[f64]>) -> Tensor {
    let shape = probs.shape();
    let (n, c, inner) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
    let mut out = vec![0.0; probs.numel()];
    let mut z = vec![0.0; c];
    for s in 0..n {
        for i in 0..inner {
            let at = |ch: usize| (s * c + ch) * inner + i;
            for (ch, zv) in z.iter_mut().enumerate() {
                let p = probs.data()[at(ch)];
                let g = noise.map_or(0.0, |g| g[at(ch)]);
                *zv = if p > 0.0 { (p.ln() + g) / tau } else { f64::NEG_INFINITY };
            }
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total = pairwise_sum_by(c, &|ch| (z[ch] - max).exp());
            for (ch, zv) in z.iter().enumerate() {
                out[at(ch)] = (zv - max).exp() / total;
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("shape preserved")
}

impl BackwardRule for TemperedSoftmaxRule {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let probs = inputs[0];
        let y = self.soft(probs);
        let shape = probs.shape();
        let (n, c, inner) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
        let mut grad = vec![0.0; probs.numel()];
        for s in 0..n {
            for i in 0..inner {
                let at = |ch: usize| (s * c + ch) * inner + i;
                let dot = pairwise_sum_by(c, &|ch| y.data()[at(ch)] * grad_out.data()[at(ch)]);
                for ch in 0..c {
                    let p = probs.data()[at(ch)];
                    // d z / d p = 1 / (tau p); a zero-probability channel gets zero gradient.
                    if p > 0.0 {
                        grad[at(ch)] = y.data()[at(ch)] * (grad_out.data()[at(ch)] - dot) / (self.tau * p);
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::new(shape.to_vec(), grad)?)])
    }
}

/// Per-voxel class selection of `probs` as a `[N, K, ...]` tensor; hard
/// one-hot in the forward pass (except [`BoundaryMode::Softened`]), tempered
/// softmax Jacobian in the backward pass.
pub fn straight_through_argmax(tape: &mut Tape, probs: Var, tau: f64, mode: BoundaryMode) -> Result<Var> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::invalid("soft_boundary", format!("tau must be positive, got {tau}")));
    }
    let p = tape.value(probs);
    let (n, c, inner) = channel_layout("soft_boundary", p.shape())?;
    for s in 0..n {
        for i in 0..inner {
            let mut total = 0.0;
            for ch in 0..c {
                let v = p.data()[(s * c + ch) * inner + i];
                if !(0.0..=1.0 + 1e-6).contains(&v) {
                    return Err(Error::invalid("soft_boundary", format!("probability {v} outside [0, 1]")));
                }
                total += v;
            }
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(
                    "soft_boundary",
                    format!("probabilities sum to {total}, not 1"),
                ));
            }
        }
    }
    let noise = match mode {
        BoundaryMode::Stochastic { seed } => Some(gumbel_noise(p.numel(), seed)),
        _ => None,
    };
    let rule = TemperedSoftmaxRule { tau, noise };
    let output = match mode {
        BoundaryMode::Softened => rule.soft(p),
        _ => {
            let mut hard = vec![0.0; p.numel()];
            for s in 0..n {
                for i in 0..inner {
                    let at = |ch: usize| (s * c + ch) * inner + i;
                    let score = |ch: usize| {
                        let v = p.data()[at(ch)];
                        match &rule.noise {
                            Some(g) if v > 0.0 => v.ln() + g[at(ch)],
                            Some(_) => f64::NEG_INFINITY,
                            None => v,
                        }
                    };
                    let mut best = 0;
                    for ch in 1..c {
                        if score(ch) > score(best) {
                            best = ch;
                        }
                    }
                    hard[at(best)] = 1.0;
                }
            }
            Tensor::new(p.shape().to_vec(), hard)?
        }
    };
    tape.custom(&[probs], output, Box::new(rule), "soft_boundary")
}

/// Boundary magnitude `[N, 1, D, H, W]` of the predicted class-index field.
///
/// The per-voxel selection from [`straight_through_argmax`] is collapsed to
/// the index of the selected class, then passed through [`sobel3d`] and
/// [`gradient_magnitude`]. One-hot probabilities of a label volume reproduce
/// [`label_boundary`] of that volume exactly.
pub fn soft_boundary(tape: &mut Tape, probs: Var, tau: f64, mode: BoundaryMode) -> Result<Var> {
    let selection = straight_through_argmax(tape, probs, tau, mode)?;
    let classes = tape.value(probs).shape()[1];
    let index_weights = tape.constant(Tensor::from_fn(&[1, classes, 1, 1, 1], |k| k as f64))?;
    let field = tape.conv3d(selection, index_weights, None, 1, 0)?;
    let responses = sobel3d(tape, field)?;
    gradient_magnitude(tape, responses, MAGNITUDE_EPS)
}
