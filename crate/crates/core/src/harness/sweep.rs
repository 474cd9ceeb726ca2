use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, EvalConfig, Metrics};
use crate::dsl::{print_programs, FeatureVersion};
use crate::env::TaskConfig;
use crate::error::{Error, Result};
use crate::policy::{ModelPolicy, PolicyKind};
use crate::synth::{synthesize, SynthConfig, SynthDataset};

/// Losses within this fraction of the best count as tied.
pub const NEAR_TIE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub lambdas: Vec<f64>,
    pub rules: Vec<usize>,
    pub features: Vec<FeatureVersion>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            lambdas: vec![0.3, 0.5, 0.7, 1.0],
            rules: vec![2, 3, 4, 5],
            features: vec![FeatureVersion::V1, FeatureVersion::V2],
        }
    }
}

impl SweepGrid {
    pub fn cells(&self) -> Vec<(f64, usize, FeatureVersion)> {
        let mut out = Vec::new();
        for &l in &self.lambdas {
            for &k in &self.rules {
                for &v in &self.features {
                    out.push((l, k, v));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub lambda: f64,
    pub rules: usize,
    pub features: FeatureVersion,
    /// Programs in the textual syntax, one per round.
    pub programs: String,
    /// Surrogate objective of each round's incumbent.
    pub synth_j: Vec<f64>,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub best: usize,
}

/// Lowest loss, except that among cells within [`NEAR_TIE`] of it the lowest
/// mean max degree wins. Remaining ties go to the earlier cell.
pub fn select_best(metrics: &[&Metrics]) -> Result<usize> {
    let best_loss = metrics.iter().map(|m| m.loss_mean).fold(f64::INFINITY, f64::min);
    if !best_loss.is_finite() {
        return Err(Error::EmptyGrid);
    }
    let bound = best_loss + NEAR_TIE * best_loss.abs();
    let mut pick: Option<(usize, f64, f64)> = None;
    for (k, m) in metrics.iter().enumerate() {
        if m.loss_mean > bound {
            continue;
        }
        let better = match pick {
            None => true,
            Some((_, d, l)) => m.total_deg_mean < d || (m.total_deg_mean == d && m.loss_mean < l),
        };
        if better {
            pick = Some((k, m.total_deg_mean, m.loss_mean));
        }
    }
    Ok(pick.expect("the best-loss cell is within the bound").0)
}

/// Synthesizes and evaluates every grid cell, each chain seeded from `base.seed`.
pub fn sweep(
    dataset: &SynthDataset,
    task: &TaskConfig,
    grid: &SweepGrid,
    base: &SynthConfig,
    eval: &EvalConfig,
) -> Result<SweepResult> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut out = Vec::with_capacity(cells.len());
    for (lambda, rules, features) in cells {
        let cfg = SynthConfig { lambda, rules, features, ..base.clone() };
        let syn = synthesize(dataset, &cfg)?;
        let programs: Vec<_> = syn.iter().map(|s| s.program.clone()).collect();
        let pol = ModelPolicy::new(&dataset.oracle, PolicyKind::Combined(programs.clone()))?;
        let metrics = evaluate(&pol, "prog", false, task, eval)?;
        out.push(SweepCell {
            lambda,
            rules,
            features,
            programs: print_programs(&programs),
            synth_j: syn.iter().map(|s| s.breakdown.j).collect(),
            metrics,
        });
    }
    let best = select_best(&out.iter().map(|c| &c.metrics).collect::<Vec<_>>())?;
    Ok(SweepResult { cells: out, best })
}
