mod gradcheck;
mod record;
mod tape;

pub use gradcheck::{
    eps_warnings, finite_difference_check, sample_coords, Coord, CoordSampling, GradcheckEntry, GradcheckReport, MAX_EPS,
    MIN_EPS,
};
pub use record::{
    loss_gradient, record_rollout, GradientBundle, GradientOptions, LeafSet, Leaves, LossGradient, Recording,
    RolloutArgs, StateLoss, TrajectoryLoss, DEFAULT_CHECKPOINT,
};
pub use tape::{Gradients, NonFiniteGradient, OpKind, Tape, Var, DEFAULT_TAPE_BUDGET};
