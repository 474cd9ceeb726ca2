use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TaskConfig;
use super::sim::{observe, reward, sample_initial, step, GlobalAction, GlobalState, ObservationMatrix};
use crate::dsl::CommGraph;
use crate::error::{Error, Result};

pub type SimRng = ChaCha8Rng;

/// Environment stream (initial state and observation noise) of rollout `index`.
pub fn env_rng(seed: u64, index: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * index);
    rng
}

/// Policy stream (random rules, link failures) of rollout `index`.
pub fn policy_rng(seed: u64, index: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * index + 1);
    rng
}

/// Communication actually delivered in one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comm {
    /// Every agent receives from every agent.
    Full,
    /// Soft attention restricted to the listed senders plus the receiver itself.
    SoftSubset(Vec<Vec<usize>>),
    /// Hard attention over exactly the listed senders.
    Hard(Vec<Vec<usize>>),
}

impl Comm {
    /// Senders per receiver, excluding self; `None` for full communication.
    pub fn selections(&self) -> Option<&[Vec<usize>]> {
        match self {
            Comm::Full => None,
            Comm::SoftSubset(s) | Comm::Hard(s) => Some(s),
        }
    }

    pub fn graph(&self, n: usize) -> CommGraph {
        match self.selections() {
            Some(sel) => CommGraph::from_selections(n, sel),
            None => CommGraph::complete(n),
        }
    }
}

pub struct StepInput<'a> {
    pub state: &'a GlobalState,
    pub obs: &'a ObservationMatrix,
    pub cfg: &'a TaskConfig,
}

/// Everything a policy produced for one timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutput {
    pub comm: Vec<Comm>,
    /// Per round, `n × n` row-major with entry `[i*n + j] = α^{j→i}`.
    pub attention: Vec<Vec<f64>>,
    /// Per round, `n × n × d_m` with block `[i*n + j] = m^{j→i}`.
    pub messages: Vec<Vec<f64>>,
    pub action: GlobalAction,
}

/// A decentralized policy: chooses communication, exchanges messages, acts.
pub trait Policy: Sync {
    fn rounds(&self) -> usize;
    fn step(&self, input: &StepInput, rng: &mut SimRng) -> Result<PolicyOutput>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub state: GlobalState,
    pub obs: ObservationMatrix,
    #[serde(flatten)]
    pub output: PolicyOutput,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    pub terminal: GlobalState,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Line {
    Step(Box<StepRecord>),
    Terminal { terminal: GlobalState },
}

impl Trajectory {
    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().map(|s| s.reward)
    }

    /// Loss averaged over the horizon: `-(1/T) Σ_t r_t`.
    pub fn mean_loss(&self) -> f64 {
        -self.rewards().sum::<f64>() / self.steps.len() as f64
    }

    /// One JSON object per timestep followed by a `{"terminal": ...}` line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut w, &serde_json::json!({ "terminal": self.terminal }))?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut steps = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Line>(&line)? {
                Line::Step(s) => steps.push(*s),
                Line::Terminal { terminal } => return Ok(Trajectory { steps, terminal }),
            }
        }
        Err(Error::Format("trajectory has no terminal line".into()))
    }
}

/// Runs one episode, handing each step to `observer` instead of storing it.
pub fn rollout_with<P, F>(policy: &P, cfg: &TaskConfig, seed: u64, index: u64, mut observer: F) -> Result<GlobalState>
where
    P: Policy + ?Sized,
    F: FnMut(StepRecord) -> Result<()>,
{
    let mut erng = env_rng(seed, index);
    let mut prng = policy_rng(seed, index);
    let mut state = sample_initial(cfg, &mut erng)?;
    for t in 0..cfg.horizon {
        let obs = observe(&state, cfg.obs_noise_sigma, &mut erng);
        let output = policy.step(&StepInput { state: &state, obs: &obs, cfg }, &mut prng)?;
        let r = reward(&state, &output.action, cfg);
        if !r.is_finite() {
            return Err(Error::NonFinite(format!("reward at step {t}")));
        }
        let next = step(&state, &output.action, cfg)?;
        observer(StepRecord { t, state, obs, output, reward: r })?;
        state = next;
    }
    Ok(state)
}

pub fn rollout<P: Policy + ?Sized>(policy: &P, cfg: &TaskConfig, seed: u64, index: u64) -> Result<Trajectory> {
    let mut steps = Vec::with_capacity(cfg.horizon);
    let terminal = rollout_with(policy, cfg, seed, index, |s| {
        steps.push(s);
        Ok(())
    })?;
    Ok(Trajectory { steps, terminal })
}

/// Runs rollouts `0..n` concurrently and reduces each with `summarize`, in index order.
pub fn rollout_many<P, T, F>(policy: &P, cfg: &TaskConfig, seed: u64, n: usize, summarize: F) -> Result<Vec<T>>
where
    P: Policy + ?Sized,
    T: Send,
    F: Fn(u64, Trajectory) -> Result<T> + Sync,
{
    (0..n as u64)
        .into_par_iter()
        .map(|k| summarize(k, rollout(policy, cfg, seed, k)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{TaskKind, sim::norm};

    /// Stands still and never communicates.
    struct Still;

    impl Policy for Still {
        fn rounds(&self) -> usize {
            1
        }
        fn step(&self, input: &StepInput, _rng: &mut SimRng) -> Result<PolicyOutput> {
            let n = input.state.n_agents();
            Ok(PolicyOutput {
                comm: vec![Comm::Hard(vec![vec![]; n])],
                attention: vec![vec![0.0; n * n]],
                messages: vec![vec![]],
                action: GlobalAction(vec![vec![0.0, 0.0]; n]),
            })
        }
    }

    fn lone_cfg() -> TaskConfig {
        let mut cfg = TaskConfig::desk(TaskKind::RandomCross);
        cfg.group_presence_prob = 1.0;
        cfg.n_agents_per_group = 1;
        cfg.horizon = 7;
        cfg
    }

    #[test]
    fn still_policy_loss_is_constant_distance() {
        let cfg = lone_cfg();
        let tr = rollout(&Still, &cfg, 3, 0).unwrap();
        assert_eq!(tr.steps.len(), 7);
        let s0 = &tr.steps[0].state;
        let dist: f64 = s0.positions.iter().zip(&s0.goals).map(|(x, g)| norm([x[0] - g[0], x[1] - g[1]])).sum();
        let total: f64 = -tr.rewards().sum::<f64>();
        assert!((total - 7.0 * dist).abs() < 1e-9 * total.max(1.0));
        assert_eq!(tr.terminal, *s0);
    }

    #[test]
    fn single_step_rollout() {
        let mut cfg = lone_cfg();
        cfg.horizon = 1;
        let tr = rollout(&Still, &cfg, 0, 0).unwrap();
        assert_eq!(tr.steps.len(), 1);
    }

    #[test]
    fn rollouts_replay_and_round_trip() {
        let cfg = lone_cfg();
        let a = rollout(&Still, &cfg, 11, 4).unwrap();
        let b = rollout(&Still, &cfg, 11, 4).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        a.write_jsonl(&mut buf).unwrap();
        let back = Trajectory::read_jsonl(&buf[..]).unwrap();
        assert_eq!(a, back);
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 8);
    }

    #[test]
    fn concurrent_rollouts_match_sequential() {
        let cfg = lone_cfg();
        let par = rollout_many(&Still, &cfg, 5, 6, |_, t| Ok(t.mean_loss())).unwrap();
        let seq: Vec<f64> = (0..6).map(|k| rollout(&Still, &cfg, 5, k).unwrap().mean_loss()).collect();
        assert_eq!(par, seq);
    }
}
