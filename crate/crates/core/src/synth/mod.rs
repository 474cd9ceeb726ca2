//! Searching for communication programs that imitate the oracle with few
//! edges: cached datasets, the surrogate objective, neighbor proposals and a
//! Metropolis–Hastings chain.

mod dataset;
mod grid;
mod mcmc;
mod propose;
mod surrogate;

pub use dataset::{collect_dataset, DatasetHeader, SynthDataset, SynthTuple};
pub use grid::{GridKind, GridPoint, GridRuleSpace, GRID_FEATURES, GRID_KINDS, GRID_LEVELS};
pub use mcmc::{
    acceptance_probability, mcmc_synthesize, mh_accept, run_chain, synthesize, synthesize_multiround, synthesize_round,
    write_chain_csv, write_synthesis_log, ChainResult, ChainRow, ProgramSpace, SearchSpace, Synthesis,
};
pub use propose::{MoveKind, Proposer};
pub use surrogate::{Breakdown, FeatureStats, Surrogate, SynthConfig};
