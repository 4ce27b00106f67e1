//! Semantic, edge and consistency losses and their sum.

use serde::{Deserialize, Serialize};

use crate::edge::{edges_from_labels, label_boundary, soft_boundary, BoundaryMode, EdgeMap};
use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::nn::ModelOutput;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Loss hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the edge Dice term.
    pub lambda1: f64,
    /// Weight of the balanced cross-entropy term.
    pub lambda2: f64,
    pub dice_eps: f64,
    /// Temperature of the straight-through softmax.
    pub tau: f64,
    pub consistency: bool,
    /// Average the consistency L1 over the whole volume instead of edge voxels.
    pub consistency_full_volume: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.5,
            dice_eps: 1e-5,
            tau: 1.0,
            consistency: true,
            consistency_full_volume: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("lambda1 and lambda2 must be non-negative".into()));
        }
        if !(self.dice_eps > 0.0 && self.tau > 0.0) {
            return Err(Error::Config("dice_eps and tau must be positive".into()));
        }
        Ok(())
    }
}

/// `1 - 2 sum(t p) / (sum(t^2) + sum(p^2) + eps)` per sample over all
/// channels and voxels, averaged over the batch.
pub fn dice_loss(tape: &mut Tape, pred: Var, target: Var, eps: f64) -> Result<Var> {
    let shape = tape.value(pred).shape().to_vec();
    if shape != tape.value(target).shape() {
        return Err(Error::shape(
            "dice_loss",
            format!("{shape:?} vs {:?}", tape.value(target).shape()),
        ));
    }
    if shape.len() < 2 {
        return Err(Error::shape("dice_loss", "expected a batched tensor"));
    }
    let axes: Vec<usize> = (1..shape.len()).collect();
    let prod = tape.mul(pred, target)?;
    let inter = tape.sum_axes(prod, &axes)?;
    let tt = tape.square(target)?;
    let tt = tape.sum_axes(tt, &axes)?;
    let pp = tape.square(pred)?;
    let pp = tape.sum_axes(pp, &axes)?;
    let denom = tape.add(tt, pp)?;
    let denom = tape.add_scalar(denom, eps)?;
    let ratio = tape.div(inter, denom)?;
    let ratio = tape.scale(ratio, -2.0)?;
    let per_sample = tape.add_scalar(ratio, 1.0)?;
    tape.mean(per_sample)
}

/// Fraction of non-edge voxels.
pub fn edge_balance(edges: &EdgeMap) -> f64 {
    1.0 - edges.edge_count() as f64 / edges.len() as f64
}

/// Class-balanced binary cross entropy on edge logits, averaged over voxels.
///
/// Edge voxels are weighted by the non-edge fraction `beta` of the batch and
/// non-edge voxels by `1 - beta`.
pub fn balanced_bce(tape: &mut Tape, logits: Var, edges: &EdgeMap) -> Result<Var> {
    let expected = {
        let [n, d, h, w] = edges.dims();
        vec![n, 1, d, h, w]
    };
    if tape.value(logits).shape() != expected {
        return Err(Error::shape(
            "balanced_bce",
            format!("logits {:?} vs edges {expected:?}", tape.value(logits).shape()),
        ));
    }
    if edges.is_empty() {
        return Err(Error::invalid("balanced_bce", "empty volume"));
    }
    let beta = edge_balance(edges);
    let pos_w = Tensor::new(expected.clone(), edges.data().iter().map(|&e| if e == 1 { beta } else { 0.0 }).collect())?;
    let neg_w = Tensor::new(expected, edges.data().iter().map(|&e| if e == 1 { 0.0 } else { 1.0 - beta }).collect())?;
    let pos_w = tape.constant(pos_w)?;
    let neg_w = tape.constant(neg_w)?;
    // -log sigmoid(x) = softplus(-x); -log(1 - sigmoid(x)) = softplus(x).
    let neg_logits = tape.scale(logits, -1.0)?;
    let on_edge = tape.softplus(neg_logits)?;
    let off_edge = tape.softplus(logits)?;
    let a = tape.mul(on_edge, pos_w)?;
    let b = tape.mul(off_edge, neg_w)?;
    let total = tape.add(a, b)?;
    let total = tape.sum(total)?;
    tape.scale(total, 1.0 / edges.len() as f64)
}

fn zero(tape: &mut Tape) -> Result<Var> {
    tape.constant(Tensor::scalar(0.0))
}

/// `lambda1 * dice(sigmoid(logits), edges) + lambda2 * balanced_bce`.
/// Terms with zero weight are not recorded.
pub fn edge_loss(tape: &mut Tape, logits: Var, edges: &EdgeMap, weights: &LossWeights) -> Result<Var> {
    let mut total = zero(tape)?;
    if weights.lambda1 > 0.0 {
        let probs = tape.sigmoid(logits)?;
        let target = tape.constant(edges.to_tensor())?;
        let dice = dice_loss(tape, probs, target, weights.dice_eps)?;
        let dice = tape.scale(dice, weights.lambda1)?;
        total = tape.add(total, dice)?;
    }
    if weights.lambda2 > 0.0 {
        let bce = balanced_bce(tape, logits, edges)?;
        let bce = tape.scale(bce, weights.lambda2)?;
        total = tape.add(total, bce)?;
    }
    Ok(total)
}

/// Options for [`consistency_loss`].
#[derive(Clone, Copy, Debug)]
pub struct ConsistencyOptions {
    pub tau: f64,
    pub mode: BoundaryMode,
    pub full_volume: bool,
}

/// Mean absolute difference between the predicted and ground-truth boundary
/// magnitudes over ground-truth edge voxels; zero when there are none.
pub fn consistency_loss(
    tape: &mut Tape,
    probs: Var,
    labels: &LabelVolume,
    opts: ConsistencyOptions,
) -> Result<Var> {
    let shape = tape.value(probs).shape().to_vec();
    if shape.len() != 5 || labels.tensor_shape(shape[1]) != shape {
        return Err(Error::shape(
            "consistency_loss",
            format!("probabilities {shape:?} vs labels {:?}", labels.dims()),
        ));
    }
    let edges = edges_from_labels(labels, shape[1])?;
    let (mask, count) = if opts.full_volume {
        (Tensor::ones(&labels.tensor_shape(1)), labels.len())
    } else {
        (edges.to_tensor(), edges.edge_count())
    };
    if count == 0 {
        return zero(tape);
    }
    let predicted = soft_boundary(tape, probs, opts.tau, opts.mode)?;
    let truth = label_boundary(tape, labels)?;
    let diff = tape.sub(predicted, truth)?;
    let diff = tape.abs(diff)?;
    let mask = tape.constant(mask)?;
    let masked = tape.mul(diff, mask)?;
    let total = tape.sum(masked)?;
    tape.scale(total, 1.0 / count as f64)
}

/// The loss terms of one forward pass; `total = semantic + consistency + edge`.
#[derive(Clone, Copy, Debug)]
pub struct LossBundle {
    pub semantic: Var,
    pub edge: Var,
    pub consistency: Var,
    pub total: Var,
}

/// Scalar values of a [`LossBundle`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub semantic: f64,
    pub edge: f64,
    pub consistency: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn values(&self, tape: &Tape) -> Result<LossValues> {
        Ok(LossValues {
            semantic: tape.value(self.semantic).item()?,
            edge: tape.value(self.edge).item()?,
            consistency: tape.value(self.consistency).item()?,
            total: tape.value(self.total).item()?,
        })
    }
}

/// All loss terms for a model output against `labels`.
///
/// Without an edge head (ablation), the edge and consistency terms are zero.
pub fn total_loss(
    tape: &mut Tape,
    output: &ModelOutput,
    labels: &LabelVolume,
    weights: &LossWeights,
    mode: BoundaryMode,
) -> Result<LossBundle> {
    weights.validate()?;
    let classes = tape.value(output.semantic_logits).shape()[1];
    let probs = tape.softmax_channels(output.semantic_logits)?;
    let target = tape.constant(labels.one_hot(classes)?)?;
    let semantic = dice_loss(tape, probs, target, weights.dice_eps)?;
    let (edge, consistency) = match output.edge_logits {
        Some(edge_logits) => {
            let edges = edges_from_labels(labels, classes)?;
            let edge = edge_loss(tape, edge_logits, &edges, weights)?;
            let consistency = if weights.consistency {
                let opts = ConsistencyOptions {
                    tau: weights.tau,
                    mode,
                    full_volume: weights.consistency_full_volume,
                };
                consistency_loss(tape, probs, labels, opts)?
            } else {
                zero(tape)?
            };
            (edge, consistency)
        }
        None => (zero(tape)?, zero(tape)?),
    };
    let partial = tape.add(semantic, consistency)?;
    let total = tape.add(partial, edge)?;
    Ok(LossBundle {
        semantic,
        edge,
        consistency,
        total,
    })
}
