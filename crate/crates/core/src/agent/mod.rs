//! Soft actor-critic over provider subsets.
//!
//! The actor emits a continuous proto-action in (0,1)^N which is decoded to
//! the nearest non-zero binary selection. Critics score (state, proto-action)
//! pairs so the actor's gradient can flow through them.

mod policy;
mod replay;
mod sac;
mod train;

pub use policy::{nearest_binary_action, squash, PolicyOutput, LOG_STD_MAX, LOG_STD_MIN};
pub use replay::{Batch, ReplayBuffer, Transition};
pub use sac::{soft_target, AgentError, Sac, SacHyperparams, UpdateStats};
pub use train::{
    evaluate_policy, Checkpoint, EpochRecord, PolicyEvaluation, TrainConfig, Trainer, CHECKPOINT_VERSION,
};
