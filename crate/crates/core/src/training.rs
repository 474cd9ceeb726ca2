//! Model-based training: unroll the policy through the differentiable
//! dynamics and reward, then ascend the discounted return with Adam.

use std::io::Write;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use swarm_autodiff::{AdamConfig, ParamGrads, Tape, Tensor, Var};

use crate::dsl::{program_selections, Program};
use crate::env::{
    apply_link_failure, env_rng, observe_with_noise, policy_rng, rollout_with, sample_initial, sample_noise,
    GlobalState, TaskConfig, TaskKind,
};
use crate::error::{Error, Result};
use crate::policy::{dist_mask_select, ModelPolicy, PolicyKind};
use crate::transformer::{forward_tape, ModelHeader, Override, TransformerParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Total rollouts sampled; iterations = `n_rollouts / batch_size`.
    pub n_rollouts: usize,
    pub batch_size: usize,
    pub discount: f64,
    pub lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Rollouts in the fixed validation set.
    pub val_rollouts: usize,
    /// Validate every this many iterations (and after the last one).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_rollouts: 2000,
            batch_size: 16,
            discount: 0.99,
            lr: 1e-3,
            clip_norm: 100.0,
            seed: 0,
            val_rollouts: 16,
            val_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(Error::Config("discount must lie in (0, 1)".into()));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("lr and clip_norm must be positive".into()));
        }
        if self.val_every == 0 {
            return Err(Error::Config("val_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn iterations(&self) -> usize {
        self.n_rollouts / self.batch_size
    }
}

/// Which attention the unrolled policy uses during training.
#[derive(Clone, Debug, PartialEq)]
pub enum CommMode {
    Soft,
    Programs(Vec<Program>),
    Dist(usize),
    NoComm,
}

impl CommMode {
    /// The executable policy with the same communication scheme.
    pub fn policy_kind(&self) -> PolicyKind {
        match self {
            CommMode::Soft => PolicyKind::TfFull,
            CommMode::Programs(p) => PolicyKind::Combined(p.clone()),
            CommMode::Dist(k) => PolicyKind::DistMask(*k),
            CommMode::NoComm => PolicyKind::NoComm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub mean_reward: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Parameters with the best validation return seen.
    pub params: TransformerParams,
    pub curve: Vec<CurvePoint>,
    pub best_val_loss: f64,
    pub best_iteration: usize,
}

pub fn write_curve_csv<W: Write>(curve: &[CurvePoint], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for p in curve {
        wr.serialize(p)?;
    }
    wr.flush()?;
    Ok(())
}

/// Returns of one differentiable rollout.
#[derive(Clone, Debug)]
pub struct RolloutGrad {
    /// `Σ_t γ^t r_t`.
    pub discounted: f64,
    /// `Σ_t r_t`.
    pub total: f64,
    pub grads: ParamGrads,
}

fn tensor(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
    Ok(Tensor::matrix(rows, cols, data)?)
}

fn overrides_for(
    mode: &CommMode,
    rounds: usize,
    state: &GlobalState,
    obs: &crate::env::ObservationMatrix,
    p_fail: f64,
    rng: &mut crate::env::SimRng,
) -> Result<Vec<Override>> {
    let n = state.n_agents();
    let mut out = Vec::with_capacity(rounds);
    for r in 0..rounds {
        let ov = match mode {
            CommMode::Soft if p_fail > 0.0 => {
                let requested: Vec<Vec<usize>> = (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect();
                let mut delivered = apply_link_failure(&requested, p_fail, rng);
                for (i, d) in delivered.iter_mut().enumerate() {
                    d.push(i);
                    d.sort_unstable();
                }
                Override::Mask(delivered)
            }
            CommMode::Soft => Override::None,
            CommMode::Programs(ps) => {
                let p = ps.get(r).ok_or_else(|| Error::Dimension(format!("no program for round {}", r + 1)))?;
                Override::Mask(apply_link_failure(&program_selections(p, state, obs, rng), p_fail, rng))
            }
            CommMode::Dist(k) => {
                let sel: Vec<Vec<usize>> = (0..n).map(|i| dist_mask_select(obs.row(i), i, *k)).collect();
                Override::Mask(apply_link_failure(&sel, p_fail, rng))
            }
            CommMode::NoComm => Override::Mask(vec![Vec::new(); n]),
        };
        out.push(ov);
    }
    Ok(out)
}

/// Unrolls rollout `index` on a tape and differentiates `-Σ γ^t r_t`.
///
/// Random draws follow the same streams as [`rollout_with`], so the forward
/// values match an executed rollout of the equivalent policy.
pub fn rollout_gradient(
    params: &TransformerParams,
    task: &TaskConfig,
    mode: &CommMode,
    discount: f64,
    seed: u64,
    index: u64,
) -> Result<RolloutGrad> {
    let h = &params.header;
    h.check_task(task)?;
    let mut erng = env_rng(seed, index);
    let mut prng = policy_rng(seed, index);
    let init = sample_initial(task, &mut erng)?;
    let n = init.n_agents();
    let unlabeled = task.task_kind == TaskKind::UnlabeledGoals;
    let mut tape = Tape::new();
    let bound = params.store.bind(&mut tape);
    let mut x = tape.constant(tensor(n, 2, init.positions.iter().flatten().copied().collect())?);
    let gather_j: Rc<Vec<usize>> = Rc::new((0..n * n).map(|r| r % n).collect());
    let off_diag = tape.constant(Tensor::vector((0..n * n).map(|r| f64::from(u8::from(r / n != r % n))).collect()));

    // goal-side constants
    let (goal_cols, goals_flat, goal_rows, reward_index) = if unlabeled {
        let ng = init.goals.len();
        let cols = tape.constant(tensor(n, 2 * ng, (0..n).flat_map(|i| init.agent_state(i)[2..].to_vec()).collect())?);
        let rows = tape.constant(tensor(n * ng, 2, init.ordered_goal_rows())?);
        // row k*n + i picks agent i's weight on global goal k
        let mut idx = vec![0; ng * n];
        for (i, order) in init.goal_order.iter().enumerate() {
            for (slot, &k) in order.iter().enumerate() {
                idx[k * n + i] = i * ng + slot;
            }
        }
        (cols, None, Some(rows), Some(Rc::new(idx)))
    } else {
        let g = tape.constant(tensor(n, 2, init.goals.iter().flatten().copied().collect())?);
        (g, Some(g), None, None)
    };

    let pc = task.reward.collision_weight;
    let dc = task.reward.collision_distance;
    let mut loss: Option<Var> = None;
    let mut total = 0.0;
    let mut discounted = 0.0;
    let mut state = init.clone();
    let mut gamma_t = 1.0;
    for _t in 0..task.horizon {
        state.positions = tape.value(x).data().chunks(2).map(|c| [c[0], c[1]]).collect();
        let noise = sample_noise(n, task.obs_noise_sigma, &mut erng);
        let obs = observe_with_noise(&state, &noise);
        let overrides = overrides_for(mode, h.rounds, &state, &obs, task.link_failure_prob, &mut prng)?;

        let xj = tape.gather_rows(x, gather_j.clone())?;
        let xi = tape.repeat_rows(x, n)?;
        let rel = tape.sub(xj, xi)?;
        let noise_c = tape.constant(tensor(n * n, 2, noise.iter().flatten().copied().collect())?);
        let o = tape.add(rel, noise_c)?;
        let s = tape.concat(&[x, goal_cols])?;
        let step = forward_tape(&mut tape, &bound, h, s, o, n, &overrides)?;

        let (r, v) = if let Some(g) = goals_flat {
            let diff = tape.sub(x, g)?;
            let dist = tape.l2_norm(diff)?;
            let goal_term = tape.sum(dist)?;
            let d = tape.l2_norm(rel)?;
            let hinge = tape.scale(d, -pc / dc)?;
            let hinge = tape.add_scalar(hinge, 2.0 * pc)?;
            let hinge = tape.relu(hinge)?;
            let hinge = tape.mul(hinge, off_diag)?;
            let coll = tape.sum(hinge)?;
            let neg = tape.add(goal_term, coll)?;
            (tape.neg(neg)?, step.action)
        } else {
            let ng = init.goals.len();
            let p_flat = tape.reshape(step.action, &[n * ng, 1])?;
            let picked = tape.gather_rows(p_flat, reward_index.clone().expect("unlabeled index"))?;
            let picked = tape.reshape(picked, &[ng, n])?;
            let best = tape.max_last(picked)?;
            let cover = tape.sum(best)?;
            let r = tape.add_scalar(cover, -(ng as f64))?;
            let w = tape.reshape(step.action, &[n * ng])?;
            let pulled = tape.mul_col(goal_rows.expect("unlabeled goals"), w)?;
            let pull = tape.segment_sum(pulled, ng)?;
            let mass = tape.sum_last(step.action)?;
            let xm = tape.mul_col(x, mass)?;
            (r, tape.sub(pull, xm)?)
        };
        let rv = tape.value(r).item();
        total += rv;
        discounted += gamma_t * rv;
        let term = tape.scale(r, -gamma_t)?;
        loss = Some(match loss {
            Some(l) => tape.add(l, term)?,
            None => term,
        });
        let dx = tape.scale(v, task.dt)?;
        x = tape.add(x, dx)?;
        gamma_t *= discount;
    }
    let loss = loss.ok_or_else(|| Error::Config("horizon must be at least 1".into()))?;
    let g = tape.backward(loss)?;
    Ok(RolloutGrad { discounted, total, grads: bound.gradients(&g) })
}

/// Mean per-step loss of the executable policy on the fixed validation seeds.
pub fn validation_loss(params: &TransformerParams, task: &TaskConfig, mode: &CommMode, seed: u64, n: usize) -> Result<f64> {
    let pol = ModelPolicy::new(params, mode.policy_kind())?;
    let losses: Vec<f64> = (0..n as u64)
        .into_par_iter()
        .map(|k| {
            let mut sum = 0.0;
            rollout_with(&pol, task, seed, k, |s| {
                sum += s.reward;
                Ok(())
            })?;
            Ok(-sum / task.horizon as f64)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / n.max(1) as f64)
}

const VAL_SEED_SALT: u64 = 0x5eed_0000_0000_0001;

/// Optimizes `init` under `mode`; returns the best-validation parameters.
pub fn train(init: TransformerParams, task: &TaskConfig, tc: &TrainConfig, mode: &CommMode) -> Result<TrainReport> {
    tc.validate()?;
    task.validate()?;
    init.header.check_task(task)?;
    let adam = AdamConfig { lr: tc.lr, ..AdamConfig::default() };
    let iters = tc.iterations();
    let val_seed = tc.seed ^ VAL_SEED_SALT;
    let mut params = init.clone();
    let mut best = init;
    let mut best_val = validation_loss(&best, task, mode, val_seed, tc.val_rollouts)?;
    let mut best_iter = 0;
    let mut curve = Vec::with_capacity(iters);
    for it in 0..iters {
        let base = (it * tc.batch_size) as u64;
        let results: Vec<RolloutGrad> = (0..tc.batch_size as u64)
            .into_par_iter()
            .map(|b| rollout_gradient(&params, task, mode, tc.discount, tc.seed, base + b))
            .collect::<Result<_>>()?;
        let mut acc = ParamGrads::default();
        let mut reward = 0.0;
        for r in &results {
            acc.accumulate(&r.grads)?;
            reward += r.total / task.horizon as f64;
        }
        acc.scale(1.0 / tc.batch_size as f64);
        let grad_norm = acc.clip_global_norm(tc.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm at iteration {it}")));
        }
        params.store.adam_step(&acc, &adam)?;
        curve.push(CurvePoint { iteration: it, mean_reward: reward / tc.batch_size as f64, grad_norm });
        if (it + 1) % tc.val_every == 0 || it + 1 == iters {
            let v = validation_loss(&params, task, mode, val_seed, tc.val_rollouts)?;
            if v < best_val {
                best_val = v;
                best = params.clone();
                best_iter = it + 1;
            }
        }
    }
    Ok(TrainReport { params: best, curve, best_val_loss: best_val, best_iteration: best_iter })
}

/// Trains a fresh oracle with full soft attention.
pub fn train_oracle(task: &TaskConfig, tc: &TrainConfig) -> Result<TrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let init = TransformerParams::init(ModelHeader::for_task(task), &mut rng)?;
    train(init, task, tc, &CommMode::Soft)
}

/// Continues training with each round's attention hardened by its program.
pub fn retrain(params: &TransformerParams, programs: &[Program], task: &TaskConfig, tc: &TrainConfig) -> Result<TrainReport> {
    if programs.len() != params.header.rounds {
        return Err(Error::Dimension(format!(
            "{} programs for a {}-round model",
            programs.len(),
            params.header.rounds
        )));
    }
    train(params.clone(), task, tc, &CommMode::Programs(programs.to_vec()))
}
