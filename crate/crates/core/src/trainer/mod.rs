//! End-to-end training with the combined objective, the leave-one-domain-out
//! protocol, checkpointing, and the ablation/sweep grids.

pub mod checkpoint;
pub mod config;
pub mod grid;
pub mod loss;
pub mod model;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Sidecar};
pub use config::{AblationFlags, RunConfig, TrainConfig};
pub use grid::{
    leave_one_out, run_ablation, run_cell, sweep_factorization_steps, AblationRow, CellResult,
    EVAL_BATCH, SWEEP_T_VALUES,
};
pub use loss::{total_loss, LossParts, VaeTerms};
pub use model::DgModel;
pub use train::{
    backward_train, check_finite_parts, evaluate, forward_train, train_run, ForwardPass, IterLog,
    TrainOutcome,
};
