//! Loss, optimizer, learning-rate schedule, training loop and grid search.

mod adam;
mod gradcheck;
mod grid;
mod loss;
mod schedule;
mod trainer;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use gradcheck::{
    grad_check, grad_check_fixture, grad_check_on, relative_error, GradCheckReport, TensorCheck, FD_STEP,
    GRAD_CHECK_TOLERANCE,
};
pub use grid::{desk_grid, grid_search, table_vii_grid, GridOutcome, GridRow};
pub use loss::{class_weights, l2_penalty, loss, weighted_bce, ClassWeights};
pub use schedule::{cyclical_lr, EarlyStopping};
pub use trainer::{
    loss_and_grad, mean_loss, model_dims, predict, train, EpochRecord, StopReason, TrainLog, TrainOutcome,
    TrainingConfig, SHARD_ROWS,
};
