//! Segmentation losses: stable binary cross-entropy on logits, Dice loss,
//! and their weighted total. Graph builders drive training; the plain
//! functions compute the same values outside a graph.

use crate::diff::{sigmoid, softplus, Graph, GraphError, NodeId, Tensor};

pub const DICE_SMOOTH: f64 = 1.0;

/// Loss term weights; defaults follow the training recipe
/// (main BCE 1, auxiliary BCE 0.4, Dice 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha1: 1.0,
            alpha2: 0.4,
            alpha3: 1.0,
        }
    }
}

/// Mean binary cross-entropy of logits against {0,1} targets, computed in
/// the log-sum-exp form.
pub fn bce_loss(logits: &Tensor, target: &Tensor) -> f64 {
    debug_assert_eq!(logits.shape(), target.shape());
    let n = logits.numel().max(1) as f64;
    logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&s, &y)| s.max(0.0) - s * y + softplus(-s.abs()))
        .sum::<f64>()
        / n
}

/// Dice loss 1 - (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps), p = sigmoid.
pub fn dice_loss(logits: &Tensor, target: &Tensor) -> f64 {
    debug_assert_eq!(logits.shape(), target.shape());
    let mut inter = 0.0;
    let mut total = 0.0;
    for (&s, &y) in logits.data().iter().zip(target.data()) {
        let p = sigmoid(s);
        inter += p * y;
        total += p + y;
    }
    1.0 - (2.0 * inter + DICE_SMOOTH) / (total + DICE_SMOOTH)
}

/// alpha1 * BCE(main) + alpha2 * BCE(aux) + alpha3 * Dice(main).
pub fn total_loss(
    main_logits: &Tensor,
    aux_logits: &Tensor,
    target: &Tensor,
    aux_target: &Tensor,
    weights: &LossWeights,
) -> f64 {
    weights.alpha1 * bce_loss(main_logits, target)
        + weights.alpha2 * bce_loss(aux_logits, aux_target)
        + weights.alpha3 * dice_loss(main_logits, target)
}

/// Graph node computing the weighted total loss for training.
pub fn total_loss_node(
    g: &mut Graph,
    main_logits: NodeId,
    aux_logits: NodeId,
    target: &Tensor,
    aux_target: &Tensor,
    weights: &LossWeights,
) -> Result<NodeId, GraphError> {
    let t = g.constant(target.clone());
    let ta = g.constant(aux_target.clone());
    let bce_main = g.bce_with_logits(main_logits, t)?;
    let bce_aux = g.bce_with_logits(aux_logits, ta)?;
    let dice = g.dice_with_logits(main_logits, t, DICE_SMOOTH)?;
    let w_main = g.scale(bce_main, weights.alpha1);
    let w_aux = g.scale(bce_aux, weights.alpha2);
    let w_dice = g.scale(dice, weights.alpha3);
    let partial = g.add(w_main, w_aux)?;
    g.add(partial, w_dice)
}
