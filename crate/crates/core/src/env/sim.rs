use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::{RewardParams, TaskConfig, TaskKind, MAX_PRESENCE_RESAMPLES};
use crate::error::{Error, Result};

pub type Vec2 = [f64; 2];

pub fn norm(v: Vec2) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

/// Positions, goals and group labels of every agent at one timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    pub positions: Vec<Vec2>,
    /// Formation tasks: one goal per agent. Unlabeled goals: the shared goal list.
    pub goals: Vec<Vec2>,
    pub group_id: Vec<usize>,
    /// Unlabeled goals only: per agent, goal indices sorted by distance at t = 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub goal_order: Vec<Vec<usize>>,
}

/// What the communication program sees of an agent's own state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateView {
    pub pos: Vec2,
    pub goal: Vec2,
}

impl GlobalState {
    pub fn n_agents(&self) -> usize {
        self.positions.len()
    }

    pub fn is_unlabeled(&self) -> bool {
        !self.goal_order.is_empty()
    }

    /// The agent's own goal (formation) or its initially nearest goal (unlabeled).
    pub fn primary_goal(&self, i: usize) -> Vec2 {
        if self.is_unlabeled() {
            self.goals[self.goal_order[i][0]]
        } else {
            self.goals[i]
        }
    }

    pub fn view(&self, i: usize) -> StateView {
        StateView {
            pos: self.positions[i],
            goal: self.primary_goal(i),
        }
    }

    /// Network input `s^i`: own position followed by the goal(s) in the agent's order.
    pub fn agent_state(&self, i: usize) -> Vec<f64> {
        let x = self.positions[i];
        let mut s = vec![x[0], x[1]];
        if self.is_unlabeled() {
            for &k in &self.goal_order[i] {
                s.extend_from_slice(&self.goals[k]);
            }
        } else {
            s.extend_from_slice(&self.goals[i]);
        }
        s
    }

    /// Goal coordinates stacked in each agent's own order: row `i*N + k` is agent `i`'s k-th goal.
    pub fn ordered_goal_rows(&self) -> Vec<f64> {
        let mut rows = Vec::with_capacity(self.goal_order.len() * self.goals.len() * 2);
        for order in &self.goal_order {
            for &k in order {
                rows.extend_from_slice(&self.goals[k]);
            }
        }
        rows
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().chain(&self.goals).all(|p| p[0].is_finite() && p[1].is_finite())
    }
}

/// Relative observations `o^{i,j}`, stored row-major by `(i, j)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationMatrix {
    pub n: usize,
    pub data: Vec<Vec2>,
}

impl ObservationMatrix {
    pub fn get(&self, i: usize, j: usize) -> Vec2 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[Vec2] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn flat(&self) -> Vec<f64> {
        self.data.iter().flat_map(|v| [v[0], v[1]]).collect()
    }
}

/// Per-agent actions: 2-D velocities (formation) or goal weights (unlabeled).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalAction(pub Vec<Vec<f64>>);

impl GlobalAction {
    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

fn uniform_in_box<R: Rng + ?Sized>(rng: &mut R, center: Vec2, half: f64) -> Vec2 {
    if half == 0.0 {
        return center;
    }
    [
        center[0] + rng.random_range(-half..=half),
        center[1] + rng.random_range(-half..=half),
    ]
}

/// Draws an initial world from the task's distribution.
pub fn sample_initial<R: Rng + ?Sized>(cfg: &TaskConfig, rng: &mut R) -> Result<GlobalState> {
    cfg.validate()?;
    let l = cfg.box_offset;
    let w = cfg.box_half_width;
    let n = cfg.n_agents_per_group;
    let mut state = GlobalState {
        positions: Vec::new(),
        goals: Vec::new(),
        group_id: Vec::new(),
        goal_order: Vec::new(),
    };
    let place_group = |state: &mut GlobalState, g: usize, start: Vec2, goal: Vec2, rng: &mut R| {
        for _ in 0..n {
            state.positions.push(uniform_in_box(rng, start, w));
            state.goals.push(uniform_in_box(rng, goal, w));
            state.group_id.push(g);
        }
    };
    match cfg.task_kind {
        TaskKind::RandomCross => {
            let centers = [[-l, 0.0], [0.0, -l], [l, 0.0], [0.0, l]];
            let need = cfg.min_groups.max(1);
            let mut present = None;
            if cfg.group_presence_prob > 0.0 {
                for _ in 0..MAX_PRESENCE_RESAMPLES {
                    let draw: Vec<bool> = (0..4).map(|_| rng.random::<f64>() < cfg.group_presence_prob).collect();
                    if draw.iter().filter(|p| **p).count() >= need {
                        present = Some(draw);
                        break;
                    }
                }
            }
            let present = present.ok_or_else(|| {
                Error::Sampling(format!(
                    "no world with {need} group(s) after {MAX_PRESENCE_RESAMPLES} resamples at presence {}",
                    cfg.group_presence_prob
                ))
            })?;
            for (g, b) in centers.iter().enumerate() {
                if present[g] {
                    place_group(&mut state, g, *b, [-b[0], -b[1]], rng);
                }
            }
        }
        TaskKind::RandomGrid => {
            let starts = [[-1i32, 0], [0, 0], [1, 0]];
            let goals = sample_grid_goals(rng, &starts);
            for (g, (s, e)) in starts.iter().zip(goals).enumerate() {
                let sc = [s[0] as f64 * l, s[1] as f64 * l];
                let gc = [e[0] as f64 * l, e[1] as f64 * l];
                place_group(&mut state, g, sc, gc, rng);
            }
        }
        TaskKind::UnlabeledGoals => {
            for _ in 0..n {
                state.positions.push(uniform_in_box(rng, [0.0, 0.0], l));
                state.group_id.push(0);
            }
            for _ in 0..n {
                state.goals.push(uniform_in_box(rng, [0.0, 0.0], l));
            }
            state.goal_order = order_goals(&state.positions, &state.goals);
        }
    }
    Ok(state)
}

/// Goal cells on the {-1,0,1}² grid, each 4-adjacent to its group's start
/// cell and distinct from every start and every other goal cell.
fn sample_grid_goals<R: Rng + ?Sized>(rng: &mut R, starts: &[[i32; 2]]) -> Vec<[i32; 2]> {
    let mut options: Vec<Vec<[i32; 2]>> = Vec::new();
    for s in starts {
        let nbrs: Vec<[i32; 2]> = [[1, 0], [-1, 0], [0, 1], [0, -1]]
            .iter()
            .map(|d| [s[0] + d[0], s[1] + d[1]])
            .filter(|c| c[0].abs() <= 1 && c[1].abs() <= 1 && !starts.contains(c))
            .collect();
        options.push(nbrs);
    }
    loop {
        let pick: Vec<[i32; 2]> = options.iter().map(|o| o[rng.random_range(0..o.len())]).collect();
        let distinct = (0..pick.len()).all(|a| (a + 1..pick.len()).all(|b| pick[a] != pick[b]));
        if distinct {
            return pick;
        }
    }
}

/// Per agent, goal indices sorted by distance (ties by index).
pub fn order_goals(positions: &[Vec2], goals: &[Vec2]) -> Vec<Vec<usize>> {
    positions
        .iter()
        .map(|x| {
            let mut idx: Vec<usize> = (0..goals.len()).collect();
            idx.sort_by(|a, b| {
                norm(sub(goals[*a], *x))
                    .total_cmp(&norm(sub(goals[*b], *x)))
                    .then(a.cmp(b))
            });
            idx
        })
        .collect()
}

/// Draws one noise sample per ordered pair (zero on the diagonal).
pub fn sample_noise<R: Rng + ?Sized>(n: usize, sigma: f64, rng: &mut R) -> Vec<Vec2> {
    let mut out = vec![[0.0; 2]; n * n];
    if sigma == 0.0 {
        return out;
    }
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let e0: f64 = StandardNormal.sample(rng);
                let e1: f64 = StandardNormal.sample(rng);
                out[i * n + j] = [sigma * e0, sigma * e1];
            }
        }
    }
    out
}

/// Noisy relative positions `o^{i,j} = x^j - x^i + ε^{i,j}`.
pub fn observe<R: Rng + ?Sized>(state: &GlobalState, sigma: f64, rng: &mut R) -> ObservationMatrix {
    let n = state.n_agents();
    let noise = sample_noise(n, sigma, rng);
    observe_with_noise(state, &noise)
}

pub fn observe_with_noise(state: &GlobalState, noise: &[Vec2]) -> ObservationMatrix {
    let n = state.n_agents();
    let x = &state.positions;
    let mut data = vec![[0.0; 2]; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let e = noise[i * n + j];
                data[i * n + j] = [x[j][0] - x[i][0] + e[0], x[j][1] - x[i][1] + e[1]];
            }
        }
    }
    ObservationMatrix { n, data }
}

/// Advances the world by one step of single-integrator dynamics.
pub fn step(state: &GlobalState, action: &GlobalAction, cfg: &TaskConfig) -> Result<GlobalState> {
    if !action.is_finite() {
        return Err(Error::NonFinite("action".into()));
    }
    let n = state.n_agents();
    if action.0.len() != n {
        return Err(Error::Dimension(format!("{} actions for {n} agents", action.0.len())));
    }
    let mut next = state.clone();
    for i in 0..n {
        let v = if state.is_unlabeled() {
            unlabeled_velocity(state, i, &action.0[i])?
        } else {
            let a = &action.0[i];
            if a.len() != 2 {
                return Err(Error::Dimension(format!("velocity of length {}", a.len())));
            }
            [a[0], a[1]]
        };
        next.positions[i][0] += v[0] * cfg.dt;
        next.positions[i][1] += v[1] * cfg.dt;
    }
    if !next.is_finite() {
        return Err(Error::NonFinite("state after step".into()));
    }
    Ok(next)
}

/// `v^i = Σ_k p^i_k (g_k − x^i)` with goals taken in the agent's own order.
pub fn unlabeled_velocity(state: &GlobalState, i: usize, weights: &[f64]) -> Result<Vec2> {
    let order = &state.goal_order[i];
    if weights.len() != order.len() {
        return Err(Error::Dimension(format!(
            "{} goal weights for {} goals",
            weights.len(),
            order.len()
        )));
    }
    let x = state.positions[i];
    let mut v = [0.0; 2];
    for (p, &k) in weights.iter().zip(order) {
        let g = state.goals[k];
        v[0] += p * (g[0] - x[0]);
        v[1] += p * (g[1] - x[1]);
    }
    Ok(v)
}

/// Collision hinge summed over ordered pairs `i ≠ j`.
pub fn collision_penalty(positions: &[Vec2], params: &RewardParams) -> f64 {
    let mut total = 0.0;
    for (i, xi) in positions.iter().enumerate() {
        for (j, xj) in positions.iter().enumerate() {
            if i != j {
                let d = norm(sub(*xi, *xj));
                total += (params.collision_weight * (2.0 - d / params.collision_distance)).max(0.0);
            }
        }
    }
    total
}

/// Negative summed goal distance minus the collision penalty. Depends on the state only.
pub fn reward_formation(state: &GlobalState, params: &RewardParams) -> f64 {
    let goal: f64 = state
        .positions
        .iter()
        .zip(&state.goals)
        .map(|(x, g)| norm(sub(*x, *g)))
        .sum();
    -goal - collision_penalty(&state.positions, params)
}

/// `Σ_k max_i p^i_k − N`, with each agent's weights mapped back to global goal ids.
pub fn reward_unlabeled(state: &GlobalState, action: &GlobalAction) -> f64 {
    let n_goals = state.goals.len();
    let mut best = vec![0.0f64; n_goals];
    for (i, w) in action.0.iter().enumerate() {
        for (slot, p) in w.iter().enumerate() {
            let k = state.goal_order[i][slot];
            best[k] = best[k].max(*p);
        }
    }
    best.iter().sum::<f64>() - n_goals as f64
}

pub fn reward(state: &GlobalState, action: &GlobalAction, cfg: &TaskConfig) -> f64 {
    match cfg.task_kind {
        TaskKind::UnlabeledGoals => reward_unlabeled(state, action),
        _ => reward_formation(state, &cfg.reward),
    }
}

/// Drops each requested edge independently with probability `p_fail`.
pub fn apply_link_failure<R: Rng + ?Sized>(selections: &[Vec<usize>], p_fail: f64, rng: &mut R) -> Vec<Vec<usize>> {
    if p_fail <= 0.0 {
        return selections.to_vec();
    }
    selections
        .iter()
        .map(|sel| sel.iter().copied().filter(|_| rng.random::<f64>() >= p_fail).collect())
        .collect()
}
