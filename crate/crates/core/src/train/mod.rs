//! Training: losses, optimiser and the epoch loop.

pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use loss::{LossBreakdown, LossWeights, WarpLossForm};
pub use optim::{AdamConfig, AdamState, PlateauConfig, PlateauState};
pub use trainer::{
    prepare_samples, train_loop, AlphaPolicy, EpochLog, PreparedSample, TrainConfig, TrainOutcome, TrainState,
};
