use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::env::{rollout_many, GlobalState, ObservationMatrix, TaskConfig};
use crate::error::{Error, Result};
use crate::policy::{ModelPolicy, PolicyKind};
use crate::transformer::TransformerParams;

/// One oracle timestep with everything needed to re-derive its action under
/// a different attention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTuple {
    pub state: GlobalState,
    pub obs: ObservationMatrix,
    /// Per round, `n·n × msg_dim` with row `i*n + j` holding `m^{j→i}`.
    pub messages: Vec<Vec<f64>>,
    /// Per round, `n × n` soft attention.
    pub attention: Vec<Vec<f64>>,
    /// `n × action_dim`.
    pub action: Vec<f64>,
}

impl SynthTuple {
    pub fn n_agents(&self) -> usize {
        self.state.n_agents()
    }

    fn check(&self, rounds: usize, msg_dim: usize, action_dim: usize) -> Result<()> {
        let n = self.n_agents();
        let ok = self.obs.n == n
            && self.obs.data.len() == n * n
            && self.messages.len() == rounds
            && self.attention.len() == rounds
            && self.messages.iter().all(|m| m.len() == n * n * msg_dim)
            && self.attention.iter().all(|a| a.len() == n * n)
            && self.action.len() == n * action_dim;
        if !ok {
            return Err(Error::Dimension(format!("dataset tuple with {n} agents has inconsistent shapes")));
        }
        for a in &self.attention {
            for row in a.chunks(n.max(1)) {
                if (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::Format("attention row does not sum to one".into()));
                }
            }
        }
        Ok(())
    }
}

/// First line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub task: TaskConfig,
    pub rounds: usize,
    pub msg_dim: usize,
    pub action_dim: usize,
    pub n_rollouts: usize,
    pub seed: u64,
    /// The oracle that produced the tuples; synthesis needs its output network.
    pub oracle: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub header: DatasetHeader,
    pub oracle: TransformerParams,
    pub tuples: Vec<SynthTuple>,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn rounds(&self) -> usize {
        self.header.rounds
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for t in &self.tuples {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| Error::Format("dataset file is empty".into()))??;
        let header: DatasetHeader = serde_json::from_str(&first)?;
        let oracle = TransformerParams::from_json_value(header.oracle.clone())?;
        oracle.header.check_task(&header.task)?;
        if oracle.header.rounds != header.rounds {
            return Err(Error::Dimension(format!(
                "dataset declares {} rounds but its oracle has {}",
                header.rounds, oracle.header.rounds
            )));
        }
        let mut tuples = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: SynthTuple = serde_json::from_str(&line)?;
            t.check(header.rounds, header.msg_dim, header.action_dim)?;
            tuples.push(t);
        }
        Ok(SynthDataset { header, oracle, tuples })
    }
}

/// Rolls out the oracle with full soft attention and keeps every timestep.
///
/// Links never fail during collection: the tuples record what the oracle
/// does when every message arrives.
pub fn collect_dataset(oracle: &TransformerParams, task: &TaskConfig, n_rollouts: usize, seed: u64) -> Result<SynthDataset> {
    oracle.header.check_task(task)?;
    let mut cfg = task.clone();
    cfg.link_failure_prob = 0.0;
    let pol = ModelPolicy::new(oracle, PolicyKind::TfFull)?;
    let ad = oracle.header.action_dim;
    let per_rollout = rollout_many(&pol, &cfg, seed, n_rollouts, |_, tr| {
        Ok(tr
            .steps
            .into_iter()
            .map(|rec| SynthTuple {
                action: rec.output.action.0.iter().flatten().copied().collect(),
                messages: rec.output.messages,
                attention: rec.output.attention,
                state: rec.state,
                obs: rec.obs,
            })
            .collect::<Vec<_>>())
    })?;
    Ok(SynthDataset {
        header: DatasetHeader {
            task: task.clone(),
            rounds: oracle.header.rounds,
            msg_dim: oracle.header.msg_dim,
            action_dim: ad,
            n_rollouts,
            seed,
            oracle: oracle.to_json_value(),
        },
        oracle: oracle.clone(),
        tuples: per_rollout.into_iter().flatten().collect(),
    })
}
