use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::surrogate::FeatureStats;
use crate::dsl::{Affine, FeatureVersion, Pred, Program, Rule, MAX_PRED_DEPTH};

/// Neighbor moves of the program chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MoveKind {
    /// Gaussian step on one coordinate of one weight vector.
    Perturb,
    /// Redraw one weight vector.
    Resample,
    /// Det ↔ Rand.
    SwapKind,
    /// ∧ ↔ ∨ at one connective.
    ToggleConnective,
    /// Add or remove one predicate node.
    GrowShrink,
    /// Replace the whole rule.
    ReplaceRule,
}

impl MoveKind {
    pub const ALL: [MoveKind; 6] = [
        MoveKind::Perturb,
        MoveKind::Resample,
        MoveKind::SwapKind,
        MoveKind::ToggleConnective,
        MoveKind::GrowShrink,
        MoveKind::ReplaceRule,
    ];
}

/// Std of perturbation steps, in units of the feature's spread.
const STEP: f64 = 0.5;

/// Draws programs and neighbors scaled to the dataset's feature spread.
#[derive(Clone, Debug)]
pub struct Proposer {
    pub version: FeatureVersion,
    pub stats: FeatureStats,
    pub allow_random: bool,
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

impl Proposer {
    pub fn new(version: FeatureVersion, stats: FeatureStats, allow_random: bool) -> Self {
        Proposer { version, stats, allow_random }
    }

    fn n_features(&self) -> usize {
        self.version.dim() - 1
    }

    /// Sparse score over one or two features.
    pub fn random_score<R: Rng + ?Sized>(&self, rng: &mut R) -> Affine {
        let m = self.n_features();
        let mut a = Affine::zeros(self.version.dim());
        let terms = rng.random_range(1..=2);
        for _ in 0..terms {
            let f = rng.random_range(0..m);
            a.0[f] = normal(rng) / self.stats.std[f];
        }
        if a.is_zero() {
            let f = rng.random_range(0..m);
            a.0[f] = 1.0 / self.stats.std[f];
        }
        a
    }

    /// `±((x_f − μ_f)/σ_f − t) ≥ 0` with `t` standard normal.
    pub fn random_atom<R: Rng + ?Sized>(&self, rng: &mut R) -> Affine {
        let f = rng.random_range(0..self.n_features());
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let t: f64 = normal(rng);
        let (mu, sd) = (self.stats.mean[f], self.stats.std[f]);
        let mut a = Affine::zeros(self.version.dim());
        a.0[f] = sign / sd;
        a.0[self.version.const_index()] = -sign * (mu / sd + t);
        a
    }

    pub fn random_rule<R: Rng + ?Sized>(&self, rng: &mut R) -> Rule {
        let dim = self.version.dim();
        let pred = if rng.random_bool(0.5) { Pred::always(dim) } else { Pred::Atom(self.random_atom(rng)) };
        if self.allow_random && rng.random_bool(0.5) {
            Rule::Rand { pred }
        } else {
            Rule::Det { score: self.random_score(rng), pred }
        }
    }

    /// `k` deterministic rules with random scores and no filtering.
    pub fn initial<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Program {
        let dim = self.version.dim();
        Program {
            features: self.version,
            rules: (0..k).map(|_| Rule::Det { score: self.random_score(rng), pred: Pred::always(dim) }).collect(),
        }
    }

    fn applicable(&self, rule: &Rule) -> Vec<MoveKind> {
        MoveKind::ALL
            .into_iter()
            .filter(|m| match m {
                MoveKind::SwapKind => rule.is_random() || self.allow_random,
                MoveKind::ToggleConnective => rule.pred().connectives() > 0,
                _ => true,
            })
            .collect()
    }

    /// A neighbor differing from `p` in exactly one rule, with the rule index and move used.
    pub fn propose<R: Rng + ?Sized>(&self, p: &Program, rng: &mut R) -> (Program, usize, MoveKind) {
        let mut out = p.clone();
        let r = rng.random_range(0..p.k());
        let moves = self.applicable(&p.rules[r]);
        let mv = moves[rng.random_range(0..moves.len())];
        let rule = &mut out.rules[r];
        match mv {
            MoveKind::Perturb => self.perturb(rule, rng),
            MoveKind::Resample => self.resample(rule, rng),
            MoveKind::SwapKind => {
                *rule = match rule {
                    Rule::Det { pred, .. } => Rule::Rand { pred: pred.clone() },
                    Rule::Rand { pred } => Rule::Det { score: self.random_score(rng), pred: pred.clone() },
                }
            }
            MoveKind::ToggleConnective => {
                let nodes = connective_nodes(rule.pred());
                let target = nodes[rng.random_range(0..nodes.len())];
                let node = node_mut(rule.pred_mut(), &mut { target }).expect("node exists");
                let placeholder = Pred::Atom(Affine(Vec::new()));
                *node = match std::mem::replace(node, placeholder) {
                    Pred::And(a, b) => Pred::Or(a, b),
                    Pred::Or(a, b) => Pred::And(a, b),
                    atom => atom,
                };
            }
            MoveKind::GrowShrink => self.grow_or_shrink(rule.pred_mut(), rng),
            MoveKind::ReplaceRule => {
                let fresh = loop {
                    let f = self.random_rule(rng);
                    if f != *rule {
                        break f;
                    }
                };
                *rule = fresh;
            }
        }
        debug_assert!(out.validate().is_ok());
        (out, r, mv)
    }

    fn perturb<R: Rng + ?Sized>(&self, rule: &mut Rule, rng: &mut R) {
        let ci = self.version.const_index();
        let m = self.n_features();
        let n_atoms = rule.pred().atoms().len();
        let has_score = matches!(rule, Rule::Det { .. });
        let pick = rng.random_range(0..n_atoms + usize::from(has_score));
        if has_score && pick == n_atoms {
            let Rule::Det { score, .. } = rule else { unreachable!() };
            let f = rng.random_range(0..m);
            score.0[f] += STEP * normal(rng) / self.stats.std[f];
            if score.0[..m].iter().all(|v| *v == 0.0) {
                score.0[f] = 1.0 / self.stats.std[f];
            }
        } else {
            let mut atoms = rule.pred_mut().atoms_mut();
            let atom = &mut atoms[pick];
            let f = rng.random_range(0..=m);
            if f == m {
                atom.0[ci] += STEP * normal(rng);
            } else {
                atom.0[f] += STEP * normal(rng) / self.stats.std[f];
            }
        }
    }

    fn resample<R: Rng + ?Sized>(&self, rule: &mut Rule, rng: &mut R) {
        let n_atoms = rule.pred().atoms().len();
        let has_score = matches!(rule, Rule::Det { .. });
        let pick = rng.random_range(0..n_atoms + usize::from(has_score));
        if has_score && pick == n_atoms {
            let Rule::Det { score, .. } = rule else { unreachable!() };
            *score = self.random_score(rng);
        } else {
            *rule.pred_mut().atoms_mut()[pick] = self.random_atom(rng);
        }
    }

    fn grow_or_shrink<R: Rng + ?Sized>(&self, pred: &mut Pred, rng: &mut R) {
        if pred.is_always() {
            *pred = Pred::Atom(self.random_atom(rng));
            return;
        }
        let growable: Vec<usize> = leaves(pred).into_iter().filter(|&(_, d)| d < MAX_PRED_DEPTH).map(|(k, _)| k).collect();
        let connectives = connective_nodes(pred);
        let grow = !growable.is_empty() && rng.random_bool(0.5);
        if grow {
            let target = growable[rng.random_range(0..growable.len())];
            let node = node_mut(pred, &mut { target }).expect("leaf exists");
            let leaf = std::mem::replace(node, Pred::Atom(Affine(Vec::new())));
            let fresh = Box::new(Pred::Atom(self.random_atom(rng)));
            *node = if rng.random_bool(0.5) { Pred::And(Box::new(leaf), fresh) } else { Pred::Or(Box::new(leaf), fresh) };
        } else if connectives.is_empty() {
            *pred = Pred::always(self.version.dim());
        } else {
            let target = connectives[rng.random_range(0..connectives.len())];
            let node = node_mut(pred, &mut { target }).expect("node exists");
            let keep_left = rng.random_bool(0.5);
            *node = match std::mem::replace(node, Pred::Atom(Affine(Vec::new()))) {
                Pred::And(a, b) | Pred::Or(a, b) => *(if keep_left { a } else { b }),
                atom => atom,
            };
        }
    }
}

/// Pre-order index of `p`'s node number `idx`.
fn node_mut<'a>(p: &'a mut Pred, idx: &mut usize) -> Option<&'a mut Pred> {
    if *idx == 0 {
        return Some(p);
    }
    *idx -= 1;
    match p {
        Pred::Atom(_) => None,
        Pred::And(a, b) | Pred::Or(a, b) => {
            if let Some(x) = node_mut(a, idx) {
                return Some(x);
            }
            node_mut(b, idx)
        }
    }
}

fn walk(p: &Pred, depth: usize, next: &mut usize, visit: &mut dyn FnMut(usize, usize, &Pred)) {
    let me = *next;
    *next += 1;
    visit(me, depth, p);
    if let Pred::And(a, b) | Pred::Or(a, b) = p {
        walk(a, depth + 1, next, visit);
        walk(b, depth + 1, next, visit);
    }
}

/// `(pre-order index, depth)` of every atom.
fn leaves(p: &Pred) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    walk(p, 0, &mut 0, &mut |k, d, node| {
        if matches!(node, Pred::Atom(_)) {
            out.push((k, d));
        }
    });
    out
}

fn connective_nodes(p: &Pred) -> Vec<usize> {
    let mut out = Vec::new();
    walk(p, 0, &mut 0, &mut |k, _, node| {
        if !matches!(node, Pred::Atom(_)) {
            out.push(k);
        }
    });
    out
}
