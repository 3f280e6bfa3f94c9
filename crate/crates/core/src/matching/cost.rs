//! Prediction/ground-truth similarity and the matching cost.

use serde::{Deserialize, Serialize};

use super::hungarian::CostMatrix;
use crate::error::{Error, Result};

pub const DICE_EPS: f64 = 1e-6;

/// `(2 sum(a b) + eps) / (sum(a) + sum(b) + eps)` for a soft mask `a` in
/// `[0, 1]` and a binary mask `b` of the same length.
pub fn dice_coefficient(soft: &[f64], target: &[bool]) -> Result<f64> {
    if soft.len() != target.len() {
        return Err(Error::shape(format!("dice: {} soft pixels vs {} target pixels", soft.len(), target.len())));
    }
    let mut inter = 0.0;
    let mut sum_a = 0.0;
    let mut sum_b = 0.0;
    for (&a, &b) in soft.iter().zip(target) {
        sum_a += a;
        if b {
            inter += a;
            sum_b += 1.0;
        }
    }
    Ok((2.0 * inter + DICE_EPS) / (sum_a + sum_b + DICE_EPS))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    /// Exponent on the class probability.
    pub alpha: f64,
    /// Exponent on the dice score.
    pub beta: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights { alpha: 0.8, beta: 1.0 }
    }
}

/// Per-slot values needed for matching, on the mask grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotValues {
    pub n: usize,
    pub num_classes: usize,
    /// `[n, num_classes]` probabilities.
    pub class_probs: Vec<f64>,
    /// `[n, pixels]` mask probabilities.
    pub soft_masks: Vec<f64>,
    pub pixels: usize,
}

impl SlotValues {
    pub fn class_prob(&self, slot: usize, class: usize) -> f64 {
        self.class_probs[slot * self.num_classes + class]
    }

    pub fn soft_mask(&self, slot: usize) -> &[f64] {
        &self.soft_masks[slot * self.pixels..(slot + 1) * self.pixels]
    }

    /// Slots reordered so that slot `i` of the result is slot `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> SlotValues {
        let mut class_probs = Vec::with_capacity(self.class_probs.len());
        let mut soft_masks = Vec::with_capacity(self.soft_masks.len());
        for &o in order {
            class_probs.extend_from_slice(&self.class_probs[o * self.num_classes..(o + 1) * self.num_classes]);
            soft_masks.extend_from_slice(self.soft_mask(o));
        }
        SlotValues { n: order.len(), class_probs, soft_masks, ..*self }
    }
}

/// Ground truth on the mask grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GtSet {
    pub grid: (usize, usize),
    /// One row-major mask per instance.
    pub masks: Vec<Vec<bool>>,
    pub classes: Vec<usize>,
}

impl GtSet {
    /// Keeps the `n` instances with the most target pixels (earlier index
    /// first on ties), preserving their order. No-op when `len() <= n`.
    pub fn keep_largest(&mut self, n: usize) {
        if self.len() <= n {
            return;
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(self.masks[i].iter().filter(|&&b| b).count()));
        let mut keep = order[..n].to_vec();
        keep.sort_unstable();
        self.masks = keep.iter().map(|&i| std::mem::take(&mut self.masks[i])).collect();
        self.classes = keep.iter().map(|&i| self.classes[i]).collect();
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// `cost[i, j] = -p_i(class_j)^alpha * dice(mask_i, gt_j)^beta`.
pub fn pairwise_cost(slots: &SlotValues, gts: &GtSet, w: CostWeights) -> Result<CostMatrix> {
    let pixels = gts.grid.0 * gts.grid.1;
    if slots.pixels != pixels {
        return Err(Error::shape(format!("slot masks have {} pixels, ground truth {pixels}", slots.pixels)));
    }
    if let Some(&c) = gts.classes.iter().find(|&&c| c >= slots.num_classes) {
        return Err(Error::Contract(format!("ground-truth class {c} but only {} classes", slots.num_classes)));
    }
    // dice numerators via the set pixels of each gt
    let sums: Vec<f64> = (0..slots.n).map(|i| slots.soft_mask(i).iter().sum()).collect();
    let mut data = vec![0.0; slots.n * gts.len()];
    for (j, gt) in gts.masks.iter().enumerate() {
        if gt.len() != pixels {
            return Err(Error::shape(format!("ground truth {j} has {} pixels, expected {pixels}", gt.len())));
        }
        let on: Vec<usize> = gt.iter().enumerate().filter(|(_, &b)| b).map(|(k, _)| k).collect();
        let area = on.len() as f64;
        for i in 0..slots.n {
            let m = slots.soft_mask(i);
            let inter: f64 = on.iter().map(|&k| m[k]).sum();
            let dice = (2.0 * inter + DICE_EPS) / (sums[i] + area + DICE_EPS);
            let p = slots.class_prob(i, gts.classes[j]);
            data[i * gts.len() + j] = -(p.powf(w.alpha) * dice.powf(w.beta));
        }
    }
    CostMatrix::new(slots.n, gts.len(), data)
}
