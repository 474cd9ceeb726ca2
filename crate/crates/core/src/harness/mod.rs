//! Evaluation metrics, the hyperparameter sweep, report artifacts and run manifests.

mod manifest;
mod metrics;
mod report;
mod sweep;

pub use manifest::{sha256_file, sha256_hex, FileHash, RunManifest};
pub use metrics::{brute_force_degrees, evaluate, evaluate_rollouts, mean_std, summarize, EvalConfig, Metrics, RolloutStats};
pub use report::{from_json, pool_seeds, render_svg, to_json, write_csv, write_report, CSV_COLUMNS};
pub use sweep::{select_best, sweep, SweepCell, SweepGrid, SweepResult, NEAR_TIE};
