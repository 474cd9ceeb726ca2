use rand::Rng;

use super::ast::{Program, Rule};
use super::features::{featurize_into, FeatureVersion};
use super::graph::CommGraph;
use crate::env::{GlobalState, ObservationMatrix, StateView, Vec2};

/// Applies one rule to candidates given their feature vectors.
///
/// `u ∈ [0, 1)` drives the random choice; deterministic rules ignore it.
/// Candidates are scanned in the given order, so listing them by increasing
/// id breaks score ties toward the lowest id.
pub fn select<'a, F>(rule: &Rule, candidates: &[usize], features: F, u: f64) -> Option<usize>
where
    F: Fn(usize) -> &'a [f64],
{
    match rule {
        Rule::Det { score, pred } => {
            let mut best: Option<(usize, f64)> = None;
            for &j in candidates {
                let phi = features(j);
                if !pred.eval(phi) {
                    continue;
                }
                let v = score.eval(phi);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            best.map(|(j, _)| j)
        }
        Rule::Rand { pred } => {
            let mut h = 0usize;
            for &j in candidates {
                if pred.eval(features(j)) {
                    h += 1;
                }
            }
            if h == 0 {
                return None;
            }
            let pick = ((u * h as f64) as usize).min(h - 1);
            candidates.iter().copied().filter(|&j| pred.eval(features(j))).nth(pick)
        }
    }
}

/// Other agents as `(id, o^{i,j})`, in increasing id order.
pub fn candidates(obs: &ObservationMatrix, i: usize) -> Vec<(usize, Vec2)> {
    (0..obs.n).filter(|&j| j != i).map(|j| (j, obs.get(i, j))).collect()
}

fn candidate_features(view: StateView, cands: &[(usize, Vec2)], version: FeatureVersion) -> (Vec<usize>, Vec<f64>, usize) {
    let dim = version.dim();
    let ids: Vec<usize> = cands.iter().map(|c| c.0).collect();
    let mut feats = vec![0.0; dim * cands.len()];
    for (k, (_, o)) in cands.iter().enumerate() {
        featurize_into(view, *o, version, &mut feats[k * dim..(k + 1) * dim]);
    }
    (ids, feats, dim)
}

/// Evaluates one rule; `NONE` is `None`. Draws exactly one uniform.
pub fn eval_rule<R: Rng + ?Sized>(
    rule: &Rule,
    version: FeatureVersion,
    view: StateView,
    cands: &[(usize, Vec2)],
    rng: &mut R,
) -> Option<usize> {
    let u: f64 = rng.random();
    let (ids, feats, dim) = candidate_features(view, cands, version);
    let slot: Vec<usize> = (0..ids.len()).collect();
    select(rule, &slot, |k| &feats[k * dim..(k + 1) * dim], u).map(|k| ids[k])
}

/// The set of senders chosen by all rules, sorted. Draws one uniform per rule.
pub fn eval_program<R: Rng + ?Sized>(
    program: &Program,
    view: StateView,
    cands: &[(usize, Vec2)],
    rng: &mut R,
) -> Vec<usize> {
    let (ids, feats, dim) = candidate_features(view, cands, program.features);
    let slot: Vec<usize> = (0..ids.len()).collect();
    let mut out: Vec<usize> = Vec::with_capacity(program.k());
    for rule in &program.rules {
        let u: f64 = rng.random();
        if let Some(k) = select(rule, &slot, |k| &feats[k * dim..(k + 1) * dim], u) {
            out.push(ids[k]);
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Per-agent selections, evaluated in agent order from one random stream.
pub fn program_selections<R: Rng + ?Sized>(
    program: &Program,
    state: &GlobalState,
    obs: &ObservationMatrix,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    (0..state.n_agents())
        .map(|i| eval_program(program, state.view(i), &candidates(obs, i), rng))
        .collect()
}

pub fn build_comm_graph<R: Rng + ?Sized>(
    program: &Program,
    state: &GlobalState,
    obs: &ObservationMatrix,
    rng: &mut R,
) -> CommGraph {
    CommGraph::from_selections(state.n_agents(), &program_selections(program, state, obs, rng))
}
