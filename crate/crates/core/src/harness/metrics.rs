use serde::{Deserialize, Serialize};

use crate::dsl::{CommGraph, DegreeStats};
use crate::env::{rollout_with, Comm, Policy, TaskConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_rollouts: usize,
    pub seed: u64,
    /// Reporting weight on the degree term of the combined objective.
    pub lambda: f64,
    /// Recount every graph's degrees from its adjacency matrix and fail on disagreement.
    pub verify_degrees: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_rollouts: 100, seed: 0, lambda: 1.0, verify_degrees: false }
    }
}

/// Summary of one evaluation rollout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    /// `-(1/T) Σ_t r_t`.
    pub loss: f64,
    /// Time averages of the per-step max degrees (each step averaged over rounds).
    pub in_deg: f64,
    pub out_deg: f64,
    pub total_deg: f64,
    /// Largest per-step max total degree within the rollout.
    pub rollout_max_deg: f64,
}

/// Aggregate over evaluation rollouts; see [`RolloutStats`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub policy: String,
    pub task: String,
    pub seed: u64,
    pub n_rollouts: usize,
    /// Soft attention over all agents; degree columns are reported as 0.
    pub full_communication: bool,
    pub loss_mean: f64,
    pub loss_std: f64,
    pub in_deg_mean: f64,
    pub in_deg_std: f64,
    pub out_deg_mean: f64,
    pub out_deg_std: f64,
    pub total_deg_mean: f64,
    pub total_deg_std: f64,
    pub rollout_max_deg_mean: f64,
    /// `-loss_mean - λ · total degree`, with the true degree even for full communication.
    pub combined_j: f64,
}

/// Sample mean and standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// In, out and total degree of every agent from an explicit adjacency matrix.
pub fn brute_force_degrees(n: usize, selections: &[Vec<usize>]) -> Vec<(usize, usize, usize)> {
    let mut adj = vec![vec![false; n]; n];
    for (i, sel) in selections.iter().enumerate() {
        for &j in sel {
            if j != i {
                adj[j][i] = true;
            }
        }
    }
    (0..n)
        .map(|v| {
            let indeg = (0..n).filter(|&u| adj[u][v]).count();
            let outdeg = (0..n).filter(|&w| adj[v][w]).count();
            (indeg, outdeg, indeg + outdeg)
        })
        .collect()
}

fn verify(graph: &CommGraph, comm: &Comm, stats: DegreeStats) -> Result<()> {
    let n = graph.n();
    let sels: Vec<Vec<usize>> = match comm.selections() {
        Some(s) => s.to_vec(),
        None => (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect(),
    };
    let bf = brute_force_degrees(n, &sels);
    let want = DegreeStats {
        max_in: bf.iter().map(|d| d.0).max().unwrap_or(0),
        max_out: bf.iter().map(|d| d.1).max().unwrap_or(0),
        max_total: bf.iter().map(|d| d.2).max().unwrap_or(0),
    };
    if want != stats {
        return Err(Error::Format(format!("degree recount {want:?} disagrees with {stats:?}")));
    }
    Ok(())
}

fn rollout_stats<P: Policy + ?Sized>(policy: &P, task: &TaskConfig, cfg: &EvalConfig, k: u64) -> Result<RolloutStats> {
    let mut reward = 0.0;
    let (mut din, mut dout, mut dtot, mut dmax) = (0.0, 0.0, 0.0, 0.0f64);
    rollout_with(policy, task, cfg.seed, k, |rec| {
        reward += rec.reward;
        let n = rec.state.n_agents();
        let rounds = rec.output.comm.len().max(1) as f64;
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for comm in &rec.output.comm {
            let g = comm.graph(n);
            let s = g.degree_stats();
            if cfg.verify_degrees {
                verify(&g, comm, s)?;
            }
            a += s.max_in as f64;
            b += s.max_out as f64;
            c += s.max_total as f64;
        }
        din += a / rounds;
        dout += b / rounds;
        dtot += c / rounds;
        dmax = dmax.max(c / rounds);
        Ok(())
    })?;
    let t = task.horizon as f64;
    Ok(RolloutStats { loss: -reward / t, in_deg: din / t, out_deg: dout / t, total_deg: dtot / t, rollout_max_deg: dmax })
}

/// Per-rollout statistics for rollouts `0..n_rollouts` of one seed, in index order.
pub fn evaluate_rollouts<P: Policy + ?Sized>(policy: &P, task: &TaskConfig, cfg: &EvalConfig) -> Result<Vec<RolloutStats>> {
    use rayon::prelude::*;
    if cfg.n_rollouts == 0 {
        return Err(Error::Config("n_rollouts must be at least 1".into()));
    }
    (0..cfg.n_rollouts as u64).into_par_iter().map(|k| rollout_stats(policy, task, cfg, k)).collect()
}

/// Summarizes a policy over `cfg.n_rollouts` rollouts.
pub fn evaluate<P: Policy + ?Sized>(
    policy: &P,
    name: &str,
    full_communication: bool,
    task: &TaskConfig,
    cfg: &EvalConfig,
) -> Result<Metrics> {
    let runs = evaluate_rollouts(policy, task, cfg)?;
    Ok(summarize(&runs, name, full_communication, task, cfg))
}

pub fn summarize(runs: &[RolloutStats], name: &str, full: bool, task: &TaskConfig, cfg: &EvalConfig) -> Metrics {
    let col = |f: fn(&RolloutStats) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
    let (loss_mean, loss_std) = col(|r| r.loss);
    let (in_m, in_s) = col(|r| r.in_deg);
    let (out_m, out_s) = col(|r| r.out_deg);
    let (tot_m, tot_s) = col(|r| r.total_deg);
    let (max_m, _) = col(|r| r.rollout_max_deg);
    let combined_j = -loss_mean - cfg.lambda * tot_m;
    let hide = |v: f64| if full { 0.0 } else { v };
    Metrics {
        policy: name.to_string(),
        task: task.task_kind.name().to_string(),
        seed: cfg.seed,
        n_rollouts: runs.len(),
        full_communication: full,
        loss_mean,
        loss_std,
        in_deg_mean: hide(in_m),
        in_deg_std: hide(in_s),
        out_deg_mean: hide(out_m),
        out_deg_std: hide(out_s),
        total_deg_mean: hide(tot_m),
        total_deg_std: hide(tot_s),
        rollout_max_deg_mean: hide(max_m),
        combined_j,
    }
}
