//! Point-mass multi-agent world: initial-state distributions, noisy relative
//! observations, dynamics, rewards and the rollout engine.

mod config;
mod rollout;
mod sim;

pub use config::{RewardParams, TaskConfig, TaskKind, MAX_PRESENCE_RESAMPLES};
pub use rollout::{
    env_rng, policy_rng, rollout, rollout_many, rollout_with, Comm, Policy, PolicyOutput, SimRng, StepInput,
    StepRecord, Trajectory,
};
pub use sim::{
    apply_link_failure, collision_penalty, norm, observe, observe_with_noise, order_goals, reward,
    reward_formation, reward_unlabeled, sample_initial, sample_noise, step, sub, unlabeled_velocity,
    GlobalAction, GlobalState, ObservationMatrix, StateView, Vec2,
};
