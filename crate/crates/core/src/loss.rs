//! Segmentation training loss: soft Dice plus binary cross-entropy.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DICE_EPS: f32 = 1.0;

pub fn dice_loss(g: &mut Graph, probs: Var, target: &Tensor) -> Result<Var> {
    g.dice_loss(probs, target, DICE_EPS)
}

pub fn bce_loss(g: &mut Graph, probs: Var, target: &Tensor) -> Result<Var> {
    g.bce_loss(probs, target)
}

/// Dice plus BCE with unit weights.
pub fn combined_loss(g: &mut Graph, probs: Var, target: &Tensor) -> Result<Var> {
    let dice = dice_loss(g, probs, target)?;
    let bce = bce_loss(g, probs, target)?;
    g.add(dice, bce)
}
