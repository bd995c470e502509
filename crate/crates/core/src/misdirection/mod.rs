//! Misdirection targets, the misdirection loss, and the first-block-only
//! training loop.

mod gradcheck;
mod loss;
mod target;
mod train;

pub use crate::encoder::SupervisionPoint;
pub use gradcheck::{encoder_gradcheck, LossSpec};
pub use loss::{hirm_loss, record_hirm_loss};
pub use target::{
    build_safety_target, build_semantic_target, compute_empirical_concept_vector,
    sample_random_target, EmpiricalConceptVector, MisdirectionTarget, TargetKind,
    RANDOM_COEFFICIENT, SEMANTIC_COEFFICIENT,
};
pub use train::{
    assert_frozen, compare_frozen, mean_loss, train, Adam, ErasureRun, FreezeEntry, FreezeReport,
    TargetBuilder, TrainConfig,
};
