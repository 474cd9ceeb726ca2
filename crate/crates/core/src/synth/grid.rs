//! A 60-program single-rule space small enough to enumerate, used to check
//! that the chain finds the true optimum.

use std::collections::HashMap;

use rand::Rng;

use super::mcmc::SearchSpace;
use super::surrogate::Surrogate;
use crate::dsl::{Affine, FeatureVersion, Pred, Program, Rule};
use crate::error::Result;

/// How the rule picks among filtered candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GridKind {
    Nearest,
    Farthest,
    Random,
}

/// Indices into the grid's axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridPoint {
    pub kind: usize,
    pub feature: usize,
    pub threshold: usize,
    pub at_least: bool,
}

pub const GRID_KINDS: [GridKind; 3] = [GridKind::Nearest, GridKind::Farthest, GridKind::Random];
pub const GRID_FEATURES: [&str; 2] = ["d", "theta"];
/// Quantile levels that define the threshold grid.
pub const GRID_LEVELS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// `{Nearest, Farthest, Random} × {d, theta} × 5 thresholds × {≥, ≤}` over V1
/// features, scored with memoization.
pub struct GridRuleSpace {
    pub surrogate: Surrogate,
    /// Per grid feature, its five threshold values.
    pub thresholds: Vec<[f64; 5]>,
    memo: HashMap<GridPoint, f64>,
}

impl GridRuleSpace {
    /// Thresholds are quantiles of each feature under a normal fit to the
    /// surrogate's feature statistics.
    pub fn new(surrogate: Surrogate) -> Self {
        let v = FeatureVersion::V1;
        let thresholds = GRID_FEATURES
            .iter()
            .map(|name| {
                let f = v.index_of(name).expect("grid feature");
                let (mu, sd) = (surrogate.stats.mean[f], surrogate.stats.std[f]);
                // standard normal quantiles of the grid levels
                let z = [-1.281_551_565_5, -0.524_400_512_7, 0.0, 0.524_400_512_7, 1.281_551_565_5];
                let mut t = [0.0; 5];
                for (k, zk) in z.iter().enumerate() {
                    t[k] = mu + sd * zk;
                }
                t
            })
            .collect();
        GridRuleSpace { surrogate, thresholds, memo: HashMap::new() }
    }

    pub fn points() -> Vec<GridPoint> {
        let mut out = Vec::with_capacity(60);
        for kind in 0..GRID_KINDS.len() {
            for feature in 0..GRID_FEATURES.len() {
                for threshold in 0..GRID_LEVELS.len() {
                    for at_least in [true, false] {
                        out.push(GridPoint { kind, feature, threshold, at_least });
                    }
                }
            }
        }
        out
    }

    pub fn program(&self, g: GridPoint) -> Program {
        let v = FeatureVersion::V1;
        let dim = v.dim();
        let f = v.index_of(GRID_FEATURES[g.feature]).expect("grid feature");
        let t = self.thresholds[g.feature][g.threshold];
        let sign = if g.at_least { 1.0 } else { -1.0 };
        let mut atom = Affine::zeros(dim);
        atom.0[f] = sign;
        atom.0[v.const_index()] = -sign * t;
        let pred = Pred::Atom(atom);
        let d = v.index_of("d").expect("d");
        let rule = match GRID_KINDS[g.kind] {
            GridKind::Random => Rule::Rand { pred },
            kind => {
                let mut score = Affine::zeros(dim);
                score.0[d] = if kind == GridKind::Nearest { -1.0 } else { 1.0 };
                Rule::Det { score, pred }
            }
        };
        Program { features: v, rules: vec![rule] }
    }

    /// The best point by exhaustive enumeration.
    pub fn exhaustive(&mut self) -> Result<(GridPoint, f64)> {
        let mut best: Option<(GridPoint, f64)> = None;
        for g in Self::points() {
            let j = self.score(&g)?;
            if best.is_none_or(|(_, b)| j > b) {
                best = Some((g, j));
            }
        }
        Ok(best.expect("nonempty grid"))
    }
}

impl SearchSpace for GridRuleSpace {
    type State = GridPoint;

    /// Moves one axis to a different value.
    fn propose<R: Rng + ?Sized>(&self, s: &GridPoint, rng: &mut R) -> GridPoint {
        let mut g = *s;
        let other = |rng: &mut R, cur: usize, n: usize| (cur + rng.random_range(1..n)) % n;
        match rng.random_range(0..4) {
            0 => g.kind = other(rng, g.kind, GRID_KINDS.len()),
            1 => g.feature = other(rng, g.feature, GRID_FEATURES.len()),
            2 => g.threshold = other(rng, g.threshold, GRID_LEVELS.len()),
            _ => g.at_least = !g.at_least,
        }
        g
    }

    fn score(&mut self, s: &GridPoint) -> Result<f64> {
        if let Some(j) = self.memo.get(s) {
            return Ok(*j);
        }
        let j = self.surrogate.evaluate(&self.program(*s))?.j;
        self.memo.insert(*s, j);
        Ok(j)
    }
}
