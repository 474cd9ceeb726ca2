use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    RandomCross,
    RandomGrid,
    UnlabeledGoals,
}

impl TaskKind {
    pub fn is_formation(self) -> bool {
        !matches!(self, TaskKind::UnlabeledGoals)
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::RandomCross => "random-cross",
            TaskKind::RandomGrid => "random-grid",
            TaskKind::UnlabeledGoals => "unlabeled-goals",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random-cross" => Ok(TaskKind::RandomCross),
            "random-grid" => Ok(TaskKind::RandomGrid),
            "unlabeled-goals" => Ok(TaskKind::UnlabeledGoals),
            other => Err(Error::Config(format!("unknown task kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    /// Hinge weight `p_c` of the pairwise collision penalty.
    pub collision_weight: f64,
    /// Collision distance `d_c`.
    pub collision_distance: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams {
            collision_weight: 1.0,
            collision_distance: 0.3,
        }
    }
}

/// World, noise and horizon settings for one task family.
///
/// Serialized as a flat JSON object; reward keys sit beside the task keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub task_kind: TaskKind,
    /// Agents per group for formation tasks; total agents for unlabeled goals.
    pub n_agents_per_group: usize,
    pub box_offset: f64,
    pub box_half_width: f64,
    pub obs_noise_sigma: f64,
    pub v_max: f64,
    pub horizon: usize,
    pub dt: f64,
    pub group_presence_prob: f64,
    /// Resample random-cross worlds until at least this many groups are present.
    pub min_groups: usize,
    pub link_failure_prob: f64,
    #[serde(flatten)]
    pub reward: RewardParams,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::desk(TaskKind::RandomCross)
    }
}

/// Upper bound on resampling attempts for random-cross group presence.
pub const MAX_PRESENCE_RESAMPLES: usize = 1000;

impl TaskConfig {
    /// Desk-scale defaults for a task family.
    pub fn desk(kind: TaskKind) -> Self {
        let box_offset = 4.0;
        TaskConfig {
            task_kind: kind,
            n_agents_per_group: 5,
            box_offset,
            box_half_width: 1.0,
            obs_noise_sigma: 0.05 * box_offset,
            v_max: 0.5,
            horizon: 50,
            dt: 0.1,
            group_presence_prob: 0.33,
            min_groups: 1,
            link_failure_prob: 0.0,
            reward: RewardParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.horizon < 1 {
            return bad("horizon must be at least 1");
        }
        if self.n_agents_per_group < 1 {
            return bad("n_agents_per_group must be positive");
        }
        if !(self.obs_noise_sigma >= 0.0) || !self.obs_noise_sigma.is_finite() {
            return bad("obs_noise_sigma must be a finite non-negative number");
        }
        if !(self.v_max > 0.0) || !self.v_max.is_finite() {
            return bad("v_max must be positive");
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad("dt must be positive");
        }
        if !(0.0..=1.0).contains(&self.group_presence_prob) {
            return bad("group_presence_prob must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.link_failure_prob) {
            return bad("link_failure_prob must lie in [0, 1]");
        }
        if !(self.box_offset.is_finite() && self.box_half_width.is_finite() && self.box_half_width >= 0.0) {
            return bad("box geometry must be finite");
        }
        if !(self.reward.collision_weight >= 0.0) {
            return bad("collision_weight must be non-negative");
        }
        if !(self.reward.collision_distance > 0.0) {
            return bad("collision_distance must be positive");
        }
        if self.task_kind == TaskKind::RandomCross && self.min_groups > 4 {
            return bad("min_groups cannot exceed 4");
        }
        Ok(())
    }

    /// Communication rounds per timestep.
    pub fn rounds(&self) -> usize {
        match self.task_kind {
            TaskKind::UnlabeledGoals => 2,
            _ => 1,
        }
    }

    /// Largest agent count a sampled world can have.
    pub fn max_agents(&self) -> usize {
        match self.task_kind {
            TaskKind::RandomCross => 4 * self.n_agents_per_group,
            TaskKind::RandomGrid => 3 * self.n_agents_per_group,
            TaskKind::UnlabeledGoals => self.n_agents_per_group,
        }
    }

    /// Width of an agent's state vector `s^i`.
    pub fn state_dim(&self) -> usize {
        match self.task_kind {
            TaskKind::UnlabeledGoals => 2 + 2 * self.n_agents_per_group,
            _ => 4,
        }
    }

    /// Width of an agent's action vector.
    pub fn action_dim(&self) -> usize {
        match self.task_kind {
            TaskKind::UnlabeledGoals => self.n_agents_per_group,
            _ => 2,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TaskConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
