//! Model composition `S(X) = g(theta(f(X)))`, Adam, the two-phase training
//! protocol and a finite-difference gradient checker.

mod adam;
mod checkpoint;
mod gradcheck;
mod model;
mod params;
mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ModelDims};
pub use gradcheck::{
    check_gradients, gradient_check, relative_error, GradCheckReport, GroupError, FD_STEP,
    REL_ERROR_FLOOR,
};
pub use model::{forward, loss_and_gradient, ForwardOutput, ModelConfig, ModelParams, PoolingKind};
pub use params::ParamSet;
pub use trainer::{finetune_phase2, train_phase1, PhaseOutcome, TrainConfig};
