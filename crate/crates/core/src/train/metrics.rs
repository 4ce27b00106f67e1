use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::edge::EdgeMap;
use crate::error::{Error, Result};
use crate::labels::LabelVolume;

fn set_dice(pred: impl Iterator<Item = bool>, truth: impl Iterator<Item = bool>) -> f64 {
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (p, t) in pred.zip(truth) {
        a += p as usize;
        b += t as usize;
        both += (p && t) as usize;
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * both as f64 / (a + b) as f64
    }
}

fn check_congruent(pred: &LabelVolume, truth: &LabelVolume) -> Result<()> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape(
            "dice_metric",
            format!("{:?} vs {:?}", pred.dims(), truth.dims()),
        ));
    }
    Ok(())
}

/// `2|A ∩ B| / (|A| + |B|)` for class `class`; 1 when both sets are empty.
pub fn dice_metric(pred: &LabelVolume, truth: &LabelVolume, class: u8) -> Result<f64> {
    check_congruent(pred, truth)?;
    Ok(set_dice(
        pred.data().iter().map(|&l| l == class),
        truth.data().iter().map(|&l| l == class),
    ))
}

/// Dice of the region `label >= min_class` in both volumes.
pub fn region_dice(pred: &LabelVolume, truth: &LabelVolume, min_class: u8) -> Result<f64> {
    check_congruent(pred, truth)?;
    Ok(set_dice(
        pred.data().iter().map(|&l| l >= min_class),
        truth.data().iter().map(|&l| l >= min_class),
    ))
}

/// Dice between two binary edge maps.
pub fn edge_dice(pred: &EdgeMap, truth: &EdgeMap) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape("edge_dice", format!("{:?} vs {:?}", pred.dims(), truth.dims())));
    }
    Ok(set_dice(
        pred.data().iter().map(|&e| e == 1),
        truth.data().iter().map(|&e| e == 1),
    ))
}

/// Segmentation scores of one prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceScores {
    /// Dice per class, background first.
    pub per_class: Vec<f64>,
    /// Mean over classes `1..K`.
    pub mean_foreground: f64,
    /// Mean of the whole-foreground Dice and the lesion Dice; `K >= 3` only.
    pub composite: Option<f64>,
}

/// Per-class, mean-foreground and composite Dice.
///
/// The composite averages the Dice of all foreground (`label >= 1`) treated as
/// one class and the Dice of the lesion region (`label >= 2`).
pub fn composite_dice(pred: &LabelVolume, truth: &LabelVolume, num_classes: usize) -> Result<DiceScores> {
    check_congruent(pred, truth)?;
    if num_classes == 0 || num_classes > 256 {
        return Err(Error::invalid("composite_dice", format!("class count {num_classes}")));
    }
    let per_class: Vec<f64> = (0..num_classes)
        .map(|c| dice_metric(pred, truth, c as u8))
        .collect::<Result<_>>()?;
    let mean_foreground = if num_classes > 1 {
        per_class[1..].iter().sum::<f64>() / (num_classes - 1) as f64
    } else {
        per_class[0]
    };
    let composite = if num_classes >= 3 {
        Some((region_dice(pred, truth, 1)? + region_dice(pred, truth, 2)?) / 2.0)
    } else {
        None
    };
    Ok(DiceScores {
        per_class,
        mean_foreground,
        composite,
    })
}

/// Averages scores over volumes, field by field.
pub fn average_scores(scores: &[DiceScores]) -> Result<DiceScores> {
    let first = scores.first().ok_or_else(|| Error::invalid("average_scores", "no scores"))?;
    let n = scores.len() as f64;
    let per_class = (0..first.per_class.len())
        .map(|c| scores.iter().map(|s| s.per_class[c]).sum::<f64>() / n)
        .collect();
    let mean_foreground = scores.iter().map(|s| s.mean_foreground).sum::<f64>() / n;
    let composite = first
        .composite
        .map(|_| scores.iter().map(|s| s.composite.unwrap_or(0.0)).sum::<f64>() / n);
    Ok(DiceScores {
        per_class,
        mean_foreground,
        composite,
    })
}

/// Evaluation of a model on one split at one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    #[serde(flatten)]
    pub dice: DiceScores,
    /// Dice of the thresholded edge head against label edges; absent without an edge stream.
    pub edge_dice: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(data: Vec<u8>) -> LabelVolume {
        let n = data.len();
        LabelVolume::new([1, 1, 1, n], data).unwrap()
    }

    #[test]
    fn both_empty_is_one() {
        let a = vol(vec![0, 0, 0]);
        assert_eq!(dice_metric(&a, &a, 2).unwrap(), 1.0);
    }

    #[test]
    fn missed_lesion_halves_composite() {
        let truth = vol(vec![0, 1, 2, 2]);
        let pred = vol(vec![0, 1, 1, 1]);
        assert_eq!(composite_dice(&pred, &truth, 3).unwrap().composite, Some(0.5));
        let binary = vol(vec![0, 1]);
        assert_eq!(composite_dice(&binary, &binary, 2).unwrap().composite, None);
    }
}
