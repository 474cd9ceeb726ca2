use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::SynthDataset;
use super::propose::Proposer;
use super::surrogate::{Breakdown, Surrogate, SynthConfig};
use crate::dsl::Program;
use crate::error::{Error, Result};

/// `min(1, exp(β·Δ))`.
pub fn acceptance_probability(delta: f64, beta: f64) -> f64 {
    let p = (beta * delta).exp();
    if p.is_nan() {
        0.0
    } else {
        p.min(1.0)
    }
}

/// Metropolis–Hastings decision from one uniform `u ∈ [0, 1)`.
pub fn mh_accept(delta: f64, beta: f64, u: f64) -> bool {
    u < acceptance_probability(delta, beta)
}

/// What the chain needs from a search space.
pub trait SearchSpace {
    type State: Clone;

    fn propose<R: Rng + ?Sized>(&self, s: &Self::State, rng: &mut R) -> Self::State;

    /// Objective of `s`; may stage cached work for [`SearchSpace::commit`].
    fn score(&mut self, s: &Self::State) -> Result<f64>;

    /// Called after `s` was scored and accepted.
    fn commit(&mut self) {}
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainRow {
    pub step: usize,
    pub j_current: f64,
    pub j_incumbent: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug)]
pub struct ChainResult<S> {
    pub best: S,
    pub best_j: f64,
    pub log: Vec<ChainRow>,
}

impl<S> ChainResult<S> {
    pub fn acceptance_rate(&self) -> f64 {
        self.log.iter().filter(|r| r.accepted).count() as f64 / self.log.len().max(1) as f64
    }
}

pub fn write_chain_csv<W: Write>(log: &[ChainRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in log {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// Runs `steps` Metropolis–Hastings steps on score `exp(β·J)` and keeps the best state seen.
pub fn run_chain<S: SearchSpace, R: Rng + ?Sized>(
    space: &mut S,
    init: S::State,
    steps: usize,
    beta: f64,
    rng: &mut R,
) -> Result<ChainResult<S::State>> {
    let mut j = space.score(&init)?;
    space.commit();
    let mut current = init;
    let mut best = current.clone();
    let mut best_j = j;
    let mut log = Vec::with_capacity(steps);
    for step in 1..=steps {
        let cand = space.propose(&current, rng);
        let jc = space.score(&cand)?;
        let u: f64 = rng.random();
        let accepted = mh_accept(jc - j, beta, u);
        if accepted {
            space.commit();
            current = cand;
            j = jc;
            if j > best_j {
                best_j = j;
                best = current.clone();
            }
        }
        log.push(ChainRow { step, j_current: j, j_incumbent: best_j, accepted });
    }
    Ok(ChainResult { best, best_j, log })
}

/// Program space over the cached surrogate of one round.
pub struct ProgramSpace {
    pub surrogate: Surrogate,
    pub proposer: Proposer,
}

impl SearchSpace for ProgramSpace {
    type State = Program;

    fn propose<R: Rng + ?Sized>(&self, s: &Program, rng: &mut R) -> Program {
        self.proposer.propose(s, rng).0
    }

    fn score(&mut self, s: &Program) -> Result<f64> {
        Ok(self.surrogate.score(s)?.j)
    }

    fn commit(&mut self) {
        self.surrogate.commit();
    }
}

/// Outcome of synthesizing one round's program.
#[derive(Clone, Debug)]
pub struct Synthesis {
    pub round: usize,
    pub program: Program,
    pub breakdown: Breakdown,
    pub log: Vec<ChainRow>,
}

/// Chain for hardening `round`, with every other round left soft.
pub fn synthesize_round<R: Rng + ?Sized>(dataset: &SynthDataset, round: usize, cfg: &SynthConfig, rng: &mut R) -> Result<Synthesis> {
    cfg.validate()?;
    let surrogate = Surrogate::new(dataset, round, cfg, cfg.lambda)?;
    let proposer = Proposer::new(cfg.features, surrogate.stats.clone(), cfg.allow_random_rules);
    let init = proposer.initial(cfg.rules, rng);
    let mut space = ProgramSpace { surrogate, proposer };
    let res = run_chain(&mut space, init, cfg.mcmc_steps, cfg.beta, rng)?;
    let breakdown = space.surrogate.evaluate(&res.best)?;
    Ok(Synthesis { round, program: res.best, breakdown, log: res.log })
}

/// Single-round synthesis.
pub fn mcmc_synthesize<R: Rng + ?Sized>(dataset: &SynthDataset, cfg: &SynthConfig, rng: &mut R) -> Result<Synthesis> {
    if dataset.rounds() != 1 {
        return Err(Error::Dimension(format!(
            "dataset has {} rounds; synthesize each round separately",
            dataset.rounds()
        )));
    }
    synthesize_round(dataset, 0, cfg, rng)
}

/// One independent chain per round, run in round order from the same stream.
pub fn synthesize_multiround<R: Rng + ?Sized>(dataset: &SynthDataset, cfg: &SynthConfig, rng: &mut R) -> Result<Vec<Synthesis>> {
    (0..dataset.rounds()).map(|r| synthesize_round(dataset, r, cfg, rng)).collect()
}

/// Every round's chain from a stream derived from `cfg.seed`, kept apart from
/// the surrogate's common random numbers.
pub fn synthesize(dataset: &SynthDataset, cfg: &SynthConfig) -> Result<Vec<Synthesis>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    synthesize_multiround(dataset, cfg, &mut rng)
}

/// Chain logs of all rounds in one CSV with a leading `round` column.
pub fn write_synthesis_log<W: Write>(syn: &[Synthesis], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["round", "step", "j_current", "j_incumbent", "accepted"])?;
    for s in syn {
        for r in &s.log {
            wr.write_record([
                s.round.to_string(),
                r.step.to_string(),
                r.j_current.to_string(),
                r.j_incumbent.to_string(),
                r.accepted.to_string(),
            ])?;
        }
    }
    wr.flush()?;
    Ok(())
}
