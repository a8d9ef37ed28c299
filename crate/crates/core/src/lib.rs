//! Desk-scale adversarial training lab.
//!
//! Several task-aware base learners (natural, l-inf adversarial, l2
//! adversarial) train side by side. A global learner follows an exponential
//! moving average of their convex mixture and, on a fixed schedule, is
//! copied back into every learner. The crate also has joint-training
//! baselines, evaluation metrics, checkpointing and empirical checks of the
//! method's regret and stability guarantees.

pub mod attack;
pub mod error;
pub mod generalist;
pub mod harness;
pub mod learner;
pub mod model;
pub mod numeric;
pub mod theory;

pub use attack::{pgd_attack, project, step_direction, AttackSpec};
pub use error::{Error, Result};
pub use generalist::{
    ema_aggregate, gamma_at, mixing_weights, redistribute, should_redistribute, train_baseline,
    train_generalist, BaselineMode, GammaSchedule, GeneralistConfig, GeneralistRun, GlobalState,
    JointTrainer, SyncSchedule, Trainer, Variant,
};
pub use learner::{
    learner_epoch, lr_at, wa_update, BaseLearner, OptimizerKind, OptimizerState, ScheduleSpec, Task,
};
pub use model::{loss_ce, Activation, Batch, Model};
pub use numeric::{convex_combine, finite_diff_grad, lp_norm, LayoutId, Matrix, Norm, ParameterVector, RngStream};
