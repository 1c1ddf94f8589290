//! Pixel accuracy, Dice and Jaccard for binary masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub dice: f64,
    pub jaccard: f64,
}

impl Metrics {
    /// Uniform average; `None` for an empty slice.
    pub fn mean(items: &[Metrics]) -> Option<Metrics> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let sum = |f: fn(&Metrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(Metrics { acc: sum(|m| m.acc), dice: sum(|m| m.dice), jaccard: sum(|m| m.jaccard) })
    }
}

/// Confusion counts of two binary masks; values above 0.5 count as positive.
pub fn confusion(pred: &Tensor, target: &Tensor) -> Result<[usize; 4]> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(format!("mask shapes {:?} and {:?} differ", pred.shape(), target.shape())));
    }
    let mut c = [0usize; 4];
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        c[2 * usize::from(p > 0.5) + usize::from(t > 0.5)] += 1;
    }
    Ok(c)
}

/// `(TN, FN, FP, TP)` counts turned into the three scores. Dice and Jaccard
/// are 1 when both masks are empty.
pub fn metrics(pred: &Tensor, target: &Tensor) -> Result<Metrics> {
    let [tn, fn_, fp, tp] = confusion(pred, target)?.map(|v| v as f64);
    let n = tn + fn_ + fp + tp;
    let errors = fp + fn_;
    let (dice, jaccard) = if tp + errors == 0.0 { (1.0, 1.0) } else { (2.0 * tp / (2.0 * tp + errors), tp / (tp + errors)) };
    Ok(Metrics { acc: (tp + tn) / n, dice, jaccard })
}
