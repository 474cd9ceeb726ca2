use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::SynthDataset;
use crate::dsl::{featurize_into, FeatureVersion, Pred, Program, Rule};
use crate::env::TaskKind;
use crate::error::{Error, Result};
use crate::transformer::{squash_action, Mlp, Transformer};

/// Synthesis hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Weight `λ̃` of the degree term.
    pub lambda: f64,
    pub mcmc_steps: usize,
    /// Inverse temperature of the Metropolis–Hastings score.
    pub beta: f64,
    /// Rules per program.
    pub rules: usize,
    pub features: FeatureVersion,
    pub allow_random_rules: bool,
    /// Independent uniform draws per tuple for random rules.
    pub samples_per_tuple: usize,
    /// Evenly spaced subsample of the dataset; 0 keeps every tuple.
    pub max_tuples: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            lambda: 0.5,
            mcmc_steps: 10_000,
            beta: 5.0,
            rules: 2,
            features: FeatureVersion::V1,
            allow_random_rules: true,
            samples_per_tuple: 1,
            max_tuples: 0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be positive".into()));
        }
        if self.mcmc_steps == 0 {
            return Err(Error::Config("mcmc_steps must be at least 1".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("beta must be positive".into()));
        }
        if self.rules == 0 || self.rules > u16::MAX as usize {
            return Err(Error::Config("rules must be at least 1".into()));
        }
        if self.samples_per_tuple == 0 {
            return Err(Error::Config("samples_per_tuple must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-feature location and scale over all dataset pairs, constant excluded.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Unit statistics, for when no data is at hand.
    pub fn unit(version: FeatureVersion) -> Self {
        let m = version.dim() - 1;
        FeatureStats { mean: vec![0.0; m], std: vec![1.0; m] }
    }
}

/// Objective value split into its two terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub j: f64,
    /// Mean over tuples of the summed L1 action gap.
    pub imitation: f64,
    /// Mean over tuples of the max total degree.
    pub degree: f64,
}

#[derive(Clone, Debug)]
enum CPred {
    True,
    Atom(Vec<(usize, f64)>),
    And(Box<CPred>, Box<CPred>),
    Or(Box<CPred>, Box<CPred>),
}

impl CPred {
    fn new(p: &Pred) -> Self {
        match p {
            Pred::Atom(a) if a.is_zero() => CPred::True,
            Pred::Atom(a) => CPred::Atom(sparse(&a.0)),
            Pred::And(a, b) => CPred::And(Box::new(CPred::new(a)), Box::new(CPred::new(b))),
            Pred::Or(a, b) => CPred::Or(Box::new(CPred::new(a)), Box::new(CPred::new(b))),
        }
    }

    fn eval(&self, phi: &[f64]) -> bool {
        match self {
            CPred::True => true,
            CPred::Atom(w) => w.iter().map(|&(k, b)| b * phi[k]).sum::<f64>() >= 0.0,
            CPred::And(a, b) => a.eval(phi) && b.eval(phi),
            CPred::Or(a, b) => a.eval(phi) || b.eval(phi),
        }
    }
}

fn sparse(w: &[f64]) -> Vec<(usize, f64)> {
    w.iter().enumerate().filter(|(_, b)| **b != 0.0).map(|(k, b)| (k, *b)).collect()
}

/// A rule lowered to sparse weights; same semantics as the interpreter.
#[derive(Clone, Debug)]
struct CRule {
    /// `None` for random rules. The constant is dropped since it cannot change an argmax.
    score: Option<Vec<(usize, f64)>>,
    pred: CPred,
}

impl CRule {
    fn new(r: &Rule, const_index: usize) -> Self {
        match r {
            Rule::Det { score, pred } => CRule {
                score: Some(sparse(&score.0).into_iter().filter(|(k, _)| *k != const_index).collect()),
                pred: CPred::new(pred),
            },
            Rule::Rand { pred } => CRule { score: None, pred: CPred::new(pred) },
        }
    }

    /// Selection of receiver `i` among `j ≠ i` given row-major features.
    fn select(&self, feats: &[f64], n: usize, dim: usize, i: usize, u: f64) -> u16 {
        let row = |j: usize| &feats[(i * n + j) * dim..(i * n + j + 1) * dim];
        match &self.score {
            Some(w) => {
                let mut best: Option<(usize, f64)> = None;
                for j in (0..n).filter(|&j| j != i) {
                    let phi = row(j);
                    if !self.pred.eval(phi) {
                        continue;
                    }
                    let v: f64 = w.iter().map(|&(k, b)| b * phi[k]).sum();
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((j, v));
                    }
                }
                best.map_or(NONE, |(j, _)| j as u16)
            }
            None => {
                let mut kept = [0u16; 64];
                let mut overflow = Vec::new();
                let mut h = 0usize;
                for j in (0..n).filter(|&j| j != i) {
                    if self.pred.eval(row(j)) {
                        if h < kept.len() {
                            kept[h] = j as u16;
                        } else {
                            overflow.push(j as u16);
                        }
                        h += 1;
                    }
                }
                if h == 0 {
                    return NONE;
                }
                let pick = ((u * h as f64) as usize).min(h - 1);
                if pick < kept.len() {
                    kept[pick]
                } else {
                    overflow[pick - kept.len()]
                }
            }
        }
    }
}

const NONE: u16 = u16::MAX;

/// Networks and cached activations needed to re-derive actions.
#[derive(Clone, Debug)]
struct Nets {
    out: Mlp,
    /// Present when hardening the first of two rounds.
    second: Option<(Mlp, Mlp)>,
    kind: TaskKind,
    v_max: f64,
    sd: usize,
    dm: usize,
    ad: usize,
}

#[derive(Clone, Debug)]
struct TupleCache {
    n: usize,
    feats: Vec<f64>,
    /// Soft attention and messages of the hardened round.
    soft: Vec<f64>,
    msgs: Vec<f64>,
    /// Per agent, the output network's first-layer value from `s` alone.
    base_out: Vec<f64>,
    target: Vec<f64>,
    second: Option<SecondRound>,
}

/// Cached pieces of the later round when the first one is hardened.
#[derive(Clone, Debug)]
struct SecondRound {
    base_hidden: Vec<f64>,
    /// Row `i*n + j`: message-network first-layer value from `o^{j,i}` alone.
    msg_obs: Vec<f64>,
    soft: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Unit {
    tuple: usize,
    uniforms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct UnitState {
    slots: Vec<u16>,
    loss: Vec<f64>,
    total: f64,
    degree: f64,
}

/// Cached evaluator of the surrogate objective for one round.
///
/// [`Surrogate::score`] reuses per-rule selections from the last committed
/// program so only changed rules are re-run; it agrees exactly with the
/// stateless [`Surrogate::evaluate`].
#[derive(Clone, Debug)]
pub struct Surrogate {
    pub round: usize,
    pub lambda: f64,
    pub version: FeatureVersion,
    pub rules: usize,
    pub stats: FeatureStats,
    nets: Nets,
    tuples: Vec<TupleCache>,
    units: Vec<Unit>,
    current: Option<(Vec<Rule>, Vec<UnitState>)>,
    pending: Option<(Vec<Rule>, Vec<Option<UnitState>>)>,
}

fn first_layer_partial(net: &Mlp, x: &[f64], offset: usize, out: &mut [f64]) {
    for (k, xv) in x.iter().enumerate() {
        if *xv != 0.0 {
            let row = &net.w1[(offset + k) * net.dh..(offset + k + 1) * net.dh];
            for (p, w) in out.iter_mut().zip(row) {
                *p += xv * w;
            }
        }
    }
}

fn finish(net: &Mlp, pre: &mut [f64], out: &mut [f64]) {
    pre.iter_mut().for_each(|v| *v = v.tanh());
    net.output(pre, out);
}

impl Surrogate {
    /// Builds the evaluator for hardening `round` of the dataset's oracle.
    pub fn new(dataset: &SynthDataset, round: usize, cfg: &SynthConfig, lambda: f64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let rounds = dataset.rounds();
        if round >= rounds {
            return Err(Error::Dimension(format!("round {} of a {rounds}-round dataset", round + 1)));
        }
        let model = Transformer::new(&dataset.oracle)?;
        let h = &model.header;
        let second = if round + 1 < rounds {
            if round + 2 != rounds {
                return Err(Error::Dimension("at most two rounds are supported".into()));
            }
            let hidden = model.hidden_net().ok_or_else(|| Error::Dimension("oracle lacks an internal network".into()))?;
            Some((hidden.clone(), model.msg_net(round + 1).clone()))
        } else {
            None
        };
        let nets = Nets {
            out: model.out_net().clone(),
            second,
            kind: h.task_kind,
            v_max: h.v_max,
            sd: h.state_dim,
            dm: h.msg_dim,
            ad: h.action_dim,
        };
        let version = cfg.features;
        let dim = version.dim();
        let picked: Vec<usize> = if cfg.max_tuples == 0 || cfg.max_tuples >= dataset.len() {
            (0..dataset.len()).collect()
        } else {
            (0..cfg.max_tuples).map(|k| k * dataset.len() / cfg.max_tuples).collect()
        };
        let tuples: Vec<TupleCache> = picked
            .par_iter()
            .map(|&t| {
                let tup = &dataset.tuples[t];
                let n = tup.n_agents();
                let mut feats = vec![0.0; n * n * dim];
                for i in 0..n {
                    let view = tup.state.view(i);
                    for j in 0..n {
                        featurize_into(view, tup.obs.get(i, j), version, &mut feats[(i * n + j) * dim..(i * n + j + 1) * dim]);
                    }
                }
                let s: Vec<Vec<f64>> = (0..n).map(|i| tup.state.agent_state(i)).collect();
                let dh = nets.out.dh;
                let mut base_out = vec![0.0; n * dh];
                for i in 0..n {
                    let b = &mut base_out[i * dh..(i + 1) * dh];
                    b.copy_from_slice(&nets.out.b1);
                    first_layer_partial(&nets.out, &s[i], 0, b);
                }
                let second = nets.second.as_ref().map(|(hidden, msg2)| {
                    let mut base_hidden = vec![0.0; n * hidden.dh];
                    for i in 0..n {
                        let b = &mut base_hidden[i * hidden.dh..(i + 1) * hidden.dh];
                        b.copy_from_slice(&hidden.b1);
                        first_layer_partial(hidden, &s[i], 0, b);
                    }
                    let ih = hidden.dout;
                    let mut msg_obs = vec![0.0; n * n * msg2.dh];
                    for i in 0..n {
                        for j in 0..n {
                            let b = &mut msg_obs[(i * n + j) * msg2.dh..(i * n + j + 1) * msg2.dh];
                            b.copy_from_slice(&msg2.b1);
                            first_layer_partial(msg2, &tup.obs.get(j, i), ih, b);
                        }
                    }
                    SecondRound { base_hidden, msg_obs, soft: tup.attention[round + 1].clone() }
                });
                TupleCache {
                    n,
                    feats,
                    soft: tup.attention[round].clone(),
                    msgs: tup.messages[round].clone(),
                    base_out,
                    target: tup.action.clone(),
                    second,
                }
            })
            .collect();
        let stats = feature_stats(&tuples, dim);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut units = Vec::with_capacity(tuples.len() * cfg.samples_per_tuple);
        for (t, tc) in tuples.iter().enumerate() {
            for _ in 0..cfg.samples_per_tuple {
                units.push(Unit { tuple: t, uniforms: (0..tc.n * cfg.rules).map(|_| rng.random()).collect() });
            }
        }
        Ok(Surrogate {
            round,
            lambda,
            version,
            rules: cfg.rules,
            stats,
            nets,
            tuples,
            units,
            current: None,
            pending: None,
        })
    }

    pub fn n_tuples(&self) -> usize {
        self.tuples.len()
    }

    fn check(&self, p: &Program) -> Result<Vec<CRule>> {
        if p.features != self.version || p.k() != self.rules {
            return Err(Error::Dimension(format!(
                "program with {} rules over {} features, evaluator expects {} over {}",
                p.k(),
                p.features.label(),
                self.rules,
                self.version.label()
            )));
        }
        p.validate().map_err(Error::Config)?;
        let ci = self.version.const_index();
        Ok(p.rules.iter().map(|r| CRule::new(r, ci)).collect())
    }

    fn combine(&self, states: impl Iterator<Item = (f64, f64)>) -> Breakdown {
        let mut loss = 0.0;
        let mut deg = 0.0;
        for (l, d) in states {
            loss += l;
            deg += d;
        }
        let m = self.units.len() as f64;
        let (imitation, degree) = (loss / m, deg / m);
        Breakdown { j: -imitation - self.lambda * degree, imitation, degree }
    }

    /// Objective of `p` computed from scratch.
    pub fn evaluate(&self, p: &Program) -> Result<Breakdown> {
        let rules = self.check(p)?;
        let all = vec![true; rules.len()];
        let states: Vec<UnitState> = self
            .units
            .par_iter()
            .map(|u| self.eval_unit(u, None, &rules, &all).expect("fresh evaluation"))
            .collect();
        Ok(self.combine(states.iter().map(|s| (s.total, s.degree))))
    }

    /// Objective of `p`, reusing work from the last committed program.
    /// Call [`Surrogate::commit`] to make `p` the new reference.
    pub fn score(&mut self, p: &Program) -> Result<Breakdown> {
        let rules = self.check(p)?;
        let changed: Vec<bool> = match &self.current {
            Some((cur, _)) => cur.iter().zip(&p.rules).map(|(a, b)| a != b).collect(),
            None => vec![true; rules.len()],
        };
        let next: Vec<Option<UnitState>> = match &self.current {
            Some((_, states)) => self
                .units
                .par_iter()
                .zip(states.par_iter())
                .map(|(u, s)| self.eval_unit(u, Some(s), &rules, &changed))
                .collect(),
            None => self.units.par_iter().map(|u| self.eval_unit(u, None, &rules, &changed)).collect(),
        };
        let b = match &self.current {
            Some((_, states)) => self.combine(
                next.iter()
                    .zip(states)
                    .map(|(n, c)| n.as_ref().map_or((c.total, c.degree), |s| (s.total, s.degree))),
            ),
            None => self.combine(next.iter().map(|s| {
                let s = s.as_ref().expect("fresh evaluation");
                (s.total, s.degree)
            })),
        };
        self.pending = Some((p.rules.clone(), next));
        Ok(b)
    }

    /// Adopts the last scored program as the reference for incremental scoring.
    pub fn commit(&mut self) {
        let Some((rules, next)) = self.pending.take() else { return };
        let states = match self.current.take() {
            Some((_, mut states)) => {
                for (s, n) in states.iter_mut().zip(next) {
                    if let Some(n) = n {
                        *s = n;
                    }
                }
                states
            }
            None => next.into_iter().map(|s| s.expect("fresh evaluation")).collect(),
        };
        self.current = Some((rules, states));
    }

    /// Per-agent selections of `p` on tuple `t` using sample 0's uniforms.
    pub fn selections(&self, p: &Program, t: usize) -> Result<Vec<Vec<usize>>> {
        let rules = self.check(p)?;
        let samples = self.units.len() / self.tuples.len();
        let u = &self.units[t * samples];
        let tc = &self.tuples[u.tuple];
        let slots = self.slots(u, tc, &rules, None, &vec![true; rules.len()]);
        Ok((0..tc.n).map(|i| selection_set(&slots[i * rules.len()..(i + 1) * rules.len()])).collect())
    }

    fn slots(&self, u: &Unit, tc: &TupleCache, rules: &[CRule], cur: Option<&[u16]>, changed: &[bool]) -> Vec<u16> {
        let (n, k, dim) = (tc.n, rules.len(), self.version.dim());
        let mut slots = cur.map_or_else(|| vec![NONE; n * k], <[u16]>::to_vec);
        for (r, rule) in rules.iter().enumerate() {
            if !changed[r] {
                continue;
            }
            for i in 0..n {
                slots[i * k + r] = rule.select(&tc.feats, n, dim, i, u.uniforms[i * k + r]);
            }
        }
        slots
    }

    fn eval_unit(&self, u: &Unit, cur: Option<&UnitState>, rules: &[CRule], changed: &[bool]) -> Option<UnitState> {
        let tc = &self.tuples[u.tuple];
        let (n, k) = (tc.n, rules.len());
        let slots = self.slots(u, tc, rules, cur.map(|c| c.slots.as_slice()), changed);
        if let Some(c) = cur {
            if c.slots == slots {
                return None;
            }
        }
        let sets: Vec<Vec<usize>> = (0..n).map(|i| selection_set(&slots[i * k..(i + 1) * k])).collect();
        let loss = if tc.second.is_some() {
            self.tuple_losses_two_round(tc, &sets)
        } else {
            (0..n)
                .map(|i| match cur {
                    Some(c) if selection_set(&c.slots[i * k..(i + 1) * k]) == sets[i] => c.loss[i],
                    _ => self.agent_loss(tc, i, &sets[i]),
                })
                .collect()
        };
        let total = loss.iter().sum();
        Some(UnitState { slots, loss, total, degree: max_total_degree(n, &sets) as f64 })
    }

    /// Aggregate of the hardened round for receiver `i`.
    fn hard_aggregate(&self, soft: &[f64], msgs: &[f64], n: usize, i: usize, sel: &[usize], out: &mut [f64]) {
        let dm = self.nets.dm;
        out.iter_mut().for_each(|v| *v = 0.0);
        let z: f64 = sel.iter().map(|&j| soft[i * n + j]).sum();
        if z == 0.0 {
            return;
        }
        for &j in sel {
            let w = soft[i * n + j] / z;
            for (acc, m) in out.iter_mut().zip(&msgs[(i * n + j) * dm..(i * n + j + 1) * dm]) {
                *acc += w * m;
            }
        }
    }

    fn action_gap(&self, tc: &TupleCache, i: usize, agg: &[f64]) -> f64 {
        let nets = &self.nets;
        let dh = nets.out.dh;
        let mut pre = tc.base_out[i * dh..(i + 1) * dh].to_vec();
        first_layer_partial(&nets.out, agg, nets.sd, &mut pre);
        let mut u = vec![0.0; nets.ad];
        finish(&nets.out, &mut pre, &mut u);
        let a: Vec<f64> = match nets.kind {
            TaskKind::UnlabeledGoals => {
                let mut v = Vec::with_capacity(u.len());
                swarm_autodiff::softmax_into(&u, &mut v);
                v
            }
            _ => squash_action([u[0], u[1]], nets.v_max).to_vec(),
        };
        a.iter().zip(&tc.target[i * nets.ad..(i + 1) * nets.ad]).map(|(x, y)| (x - y).abs()).sum()
    }

    fn agent_loss(&self, tc: &TupleCache, i: usize, sel: &[usize]) -> f64 {
        let mut agg = vec![0.0; self.nets.dm];
        self.hard_aggregate(&tc.soft, &tc.msgs, tc.n, i, sel, &mut agg);
        self.action_gap(tc, i, &agg)
    }

    fn tuple_losses_two_round(&self, tc: &TupleCache, sets: &[Vec<usize>]) -> Vec<f64> {
        let (hidden, msg2) = self.nets.second.as_ref().expect("two-round nets");
        let sr = tc.second.as_ref().expect("two-round cache");
        let (n, dm, sd) = (tc.n, self.nets.dm, self.nets.sd);
        let ih = hidden.dout;
        let mut agg = vec![0.0; dm];
        let mut hs = vec![0.0; n * ih];
        for i in 0..n {
            self.hard_aggregate(&tc.soft, &tc.msgs, n, i, &sets[i], &mut agg);
            let mut pre = sr.base_hidden[i * hidden.dh..(i + 1) * hidden.dh].to_vec();
            first_layer_partial(hidden, &agg, sd, &mut pre);
            finish(hidden, &mut pre, &mut hs[i * ih..(i + 1) * ih]);
        }
        // sender projections W·h^j, shared by every receiver
        let mdh = msg2.dh;
        let mut hproj = vec![0.0; n * mdh];
        for j in 0..n {
            first_layer_partial(msg2, &hs[j * ih..(j + 1) * ih], 0, &mut hproj[j * mdh..(j + 1) * mdh]);
        }
        let mut pre = vec![0.0; mdh];
        let mut m = vec![0.0; dm];
        (0..n)
            .map(|i| {
                agg.iter_mut().for_each(|v| *v = 0.0);
                for j in 0..n {
                    let w = sr.soft[i * n + j];
                    if w == 0.0 {
                        continue;
                    }
                    for ((p, a), b) in pre
                        .iter_mut()
                        .zip(&sr.msg_obs[(i * n + j) * mdh..(i * n + j + 1) * mdh])
                        .zip(&hproj[j * mdh..(j + 1) * mdh])
                    {
                        *p = a + b;
                    }
                    finish(msg2, &mut pre, &mut m);
                    for (acc, v) in agg.iter_mut().zip(&m) {
                        *acc += w * v;
                    }
                }
                self.action_gap(tc, i, &agg)
            })
            .collect()
    }
}

fn selection_set(slots: &[u16]) -> Vec<usize> {
    let mut v: Vec<usize> = slots.iter().filter(|&&s| s != NONE).map(|&s| s as usize).collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn max_total_degree(n: usize, sets: &[Vec<usize>]) -> usize {
    let mut deg = vec![0usize; n];
    for (i, s) in sets.iter().enumerate() {
        deg[i] += s.len();
        for &j in s {
            deg[j] += 1;
        }
    }
    deg.into_iter().max().unwrap_or(0)
}

fn feature_stats(tuples: &[TupleCache], dim: usize) -> FeatureStats {
    let m = dim - 1;
    let mut sum = vec![0.0; m];
    let mut sq = vec![0.0; m];
    let mut count = 0usize;
    for tc in tuples {
        for i in 0..tc.n {
            for j in (0..tc.n).filter(|&j| j != i) {
                let phi = &tc.feats[(i * tc.n + j) * dim..(i * tc.n + j) * dim + m];
                for (k, v) in phi.iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        return FeatureStats { mean: vec![0.0; m], std: vec![1.0; m] };
    }
    let c = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / c).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, mu)| {
            let v = (q / c - mu * mu).max(0.0).sqrt();
            if v > 1e-9 {
                v
            } else {
                1.0
            }
        })
        .collect();
    FeatureStats { mean, std }
}
