//! Bipartite matching between prediction slots and ground truth, the
//! set-prediction loss and the training loop.

mod cost;
mod hungarian;
mod loss;
mod train;

pub use cost::{dice_coefficient, pairwise_cost, CostWeights, GtSet, SlotValues, DICE_EPS};
pub use hungarian::{hungarian, Assignment, CostMatrix};
pub use loss::{
    compute_loss, compute_loss_frozen, match_slots, targets_for_tile, LossBreakdown, LossNodes, LossWeights, SlotLogits, MASK_STRIDE,
};
pub use train::{
    fit, parse_loss_csv, LossRecord, RunDir, TrainConfig, CHECKPOINT_FILE, LOSS_CSV_HEADER, LOSS_CSV_VERSION,
    LOSS_FILE, STATE_FILE,
};
