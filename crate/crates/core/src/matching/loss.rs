//! Set-prediction loss for one tile.
//!
//! Every term is summed over slots (or matched pairs) and divided by
//! `max(G, 1)`. Classification and objectness use sigmoid cross-entropy; a
//! matched slot's objectness target is the detached dice of its pair and an
//! unmatched slot's is zero.

use serde::{Deserialize, Serialize};

use super::cost::{pairwise_cost, CostWeights, GtSet, SlotValues, DICE_EPS};
use super::hungarian::{hungarian, Assignment};
use crate::datagen::{pad_to_grid, AnnotatedTile};
use crate::decoder::DecoderOutput;
use crate::diffcore::{Graph, NodeId, Real, Tensor};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Mask-grid stride relative to the input.
pub const MASK_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cls: f64,
    pub dice: f64,
    pub bce: f64,
    pub obj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cls: 2.0, dice: 2.0, bce: 2.0, obj: 1.0 }
    }
}

/// Graph nodes the loss reads.
#[derive(Clone, Copy, Debug)]
pub struct SlotLogits {
    /// `[N, K]`
    pub class_logits: NodeId,
    /// `[N, 1]`
    pub objectness_logits: NodeId,
    /// `[N, h, w]`
    pub mask_logits: NodeId,
}

impl From<&DecoderOutput> for SlotLogits {
    fn from(o: &DecoderOutput) -> Self {
        SlotLogits { class_logits: o.class_logits, objectness_logits: o.objectness_logits, mask_logits: o.mask_logits }
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl SlotLogits {
    fn dims<T: Real>(&self, g: &Graph<T>) -> Result<(usize, usize, usize, usize)> {
        let (cs, os, ms) = (g.shape(self.class_logits), g.shape(self.objectness_logits), g.shape(self.mask_logits));
        match (cs, os, ms) {
            (&[n, k], &[n2, 1], &[n3, h, w]) if n == n2 && n == n3 => Ok((n, k, h, w)),
            _ => Err(Error::shape(format!("slot logits disagree: class {cs:?}, objectness {os:?}, masks {ms:?}"))),
        }
    }

    /// Current probabilities as plain values.
    pub fn values<T: Real>(&self, g: &Graph<T>) -> Result<SlotValues> {
        let (n, k, h, w) = self.dims(g)?;
        let probs = |id: NodeId| g.value(id).data().iter().map(|v| sigmoid(v.as_f64())).collect::<Vec<_>>();
        Ok(SlotValues {
            n,
            num_classes: k,
            class_probs: probs(self.class_logits),
            soft_masks: probs(self.mask_logits),
            pixels: h * w,
        })
    }
}

/// Ground truth of a tile on the mask grid of its padded image. With one
/// class every instance maps to class 0.
pub fn targets_for_tile(tile: &AnnotatedTile, num_classes: usize) -> Result<GtSet> {
    let (h, w) = tile.extent();
    let (padded, _) = pad_to_grid(&tile.image, crate::backbone::GRID);
    let (ph, pw) = (padded.shape()[1], padded.shape()[2]);
    let mut masks = Vec::with_capacity(tile.instances.len());
    let mut classes = Vec::with_capacity(tile.instances.len());
    for inst in &tile.instances {
        let full = BinaryMask::from_fn(ph, pw, |y, x| y < h && x < w && inst.mask.get(y, x));
        masks.push(full.downsample_majority(MASK_STRIDE)?.bits().to_vec());
        let class = if num_classes == 1 { 0 } else { inst.class_id };
        if class >= num_classes {
            return Err(Error::Contract(format!("instance class {class} with {num_classes} classes configured")));
        }
        classes.push(class);
    }
    Ok(GtSet { grid: (ph / MASK_STRIDE, pw / MASK_STRIDE), masks, classes })
}

/// Hungarian matching on the current slot values.
pub fn match_slots<T: Real>(g: &Graph<T>, slots: &SlotLogits, gts: &GtSet, w: CostWeights) -> Result<Assignment> {
    hungarian(&pairwise_cost(&slots.values(g)?, gts, w)?)
}

/// Loss nodes: the weighted total and each unweighted component.
#[derive(Clone, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub cls: NodeId,
    pub dice: NodeId,
    pub bce: NodeId,
    pub obj: NodeId,
    /// Objectness target per slot.
    pub objectness_target: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub dice: f64,
    pub bce: f64,
    pub obj: f64,
}

impl LossNodes {
    pub fn breakdown<T: Real>(&self, g: &Graph<T>) -> LossBreakdown {
        let v = |id: NodeId| g.value(id).data()[0].as_f64();
        LossBreakdown { total: v(self.total), cls: v(self.cls), dice: v(self.dice), bce: v(self.bce), obj: v(self.obj) }
    }
}

/// Weighted set loss. The objectness target of a matched slot is the
/// current dice of its mask, taken as a constant (no gradient flows through
/// it); unmatched slots target zero.
pub fn compute_loss<T: Real>(
    g: &mut Graph<T>,
    slots: &SlotLogits,
    gts: &GtSet,
    assignment: &Assignment,
    weights: LossWeights,
) -> Result<LossNodes> {
    loss_impl(g, slots, gts, assignment, weights, None)
}

/// [`compute_loss`] with the objectness targets supplied instead of read
/// off the current masks. With [`LossNodes::objectness_target`] from a
/// [`compute_loss`] call at the same point the two agree; holding them fixed makes the loss an ordinary
/// differentiable function of the slot logits.
pub fn compute_loss_frozen<T: Real>(
    g: &mut Graph<T>,
    slots: &SlotLogits,
    gts: &GtSet,
    assignment: &Assignment,
    weights: LossWeights,
    objectness_target: &[f64],
) -> Result<LossNodes> {
    loss_impl(g, slots, gts, assignment, weights, Some(objectness_target))
}

fn loss_impl<T: Real>(
    g: &mut Graph<T>,
    slots: &SlotLogits,
    gts: &GtSet,
    assignment: &Assignment,
    weights: LossWeights,
    frozen: Option<&[f64]>,
) -> Result<LossNodes> {
    let (n, k, h, w) = slots.dims(g)?;
    let pixels = h * w;
    if (h, w) != gts.grid {
        return Err(Error::shape(format!("mask grid {:?} vs ground-truth grid {:?}", (h, w), gts.grid)));
    }
    let n_gt = gts.len();
    if assignment.pairs.len() != n_gt
        || assignment.pairs.iter().enumerate().any(|(j, &(p, gt))| gt != j || p >= n)
    {
        return Err(Error::Contract(format!(
            "assignment {:?} does not cover {n_gt} ground truths with {n} predictions",
            assignment.pairs
        )));
    }
    let norm = T::lit(n_gt.max(1) as f64);
    let matched = assignment.prediction_for_gt();

    let mut cls_target = Tensor::<T>::zeros(&[n, k]);
    for (j, &p) in matched.iter().enumerate() {
        cls_target.data_mut()[p * k + gts.classes[j]] = T::one();
    }
    let cls_el = g.bce_with_logits(slots.class_logits, &cls_target)?;
    let cls_sum = g.sum(cls_el);
    let cls = g.scale(cls_sum, T::one() / norm);

    let mut obj_target = Tensor::<T>::zeros(&[n, 1]);
    let (dice, bce) = if n_gt == 0 {
        (g.input(Tensor::scalar(T::zero())), g.input(Tensor::scalar(T::zero())))
    } else {
        let flat = g.reshape(slots.mask_logits, &[n, pixels])?;
        let picked = g.gather_rows(flat, &matched)?;
        let target = Tensor::new(
            vec![n_gt, pixels],
            gts.masks.iter().flat_map(|m| m.iter().map(|&b| if b { T::one() } else { T::zero() })).collect(),
        )?;
        let probs = g.sigmoid(picked);
        let dice_rows = g.dice_rows(probs, &target, T::lit(DICE_EPS))?;
        for (j, &p) in matched.iter().enumerate() {
            obj_target.data_mut()[p] = g.value(dice_rows).data()[j];
        }
        if let Some(t) = frozen {
            if t.len() != n {
                return Err(Error::shape(format!("{} objectness targets for {n} slots", t.len())));
            }
            obj_target = Tensor::from_fn(&[n, 1], |i| T::lit(t[i]));
        }
        let dice_sum = g.sum(dice_rows);
        let dice = g.affine(dice_sum, -T::one() / norm, T::lit(n_gt as f64) / norm);
        let bce_el = g.bce_with_logits(picked, &target)?;
        let bce_sum = g.sum(bce_el);
        let bce = g.scale(bce_sum, T::one() / (norm * T::lit(pixels as f64)));
        (dice, bce)
    };
    let obj_el = g.bce_with_logits(slots.objectness_logits, &obj_target)?;
    let obj_sum = g.sum(obj_el);
    let obj = g.scale(obj_sum, T::one() / norm);

    let terms = [(cls, weights.cls), (dice, weights.dice), (bce, weights.bce), (obj, weights.obj)];
    let mut total = g.scale(terms[0].0, T::lit(terms[0].1));
    for &(node, wt) in &terms[1..] {
        let scaled = g.scale(node, T::lit(wt));
        total = g.add(total, scaled)?;
    }
    let objectness_target = obj_target.data().iter().map(|v| v.as_f64()).collect();
    Ok(LossNodes { total, cls, dice, bce, obj, objectness_target })
}
