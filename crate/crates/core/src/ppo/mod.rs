//! PPO fine-tuning of the planner's strategy policy.

mod buffer;
mod gae;
mod loss;
mod train;

pub use buffer::{RolloutBuffer, Sample};
pub use gae::compute_gae;
pub use loss::{clipped_objective, ppo_policy_loss, value_loss, PolicyLoss};
pub use train::{
    train_ppo, update_networks, EpisodeSource, MetricsRow, PpoConfig, PpoState, UpdateStats,
};
