use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "swarm", version, about = "Synthesize sparse communication programs for multi-agent planning")]
pub struct Cli {
    /// Base seed of the stage. `SWARM_SEED` overrides it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Manifest path; defaults to `<first output>.manifest.json`.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct TaskArgs {
    /// random-cross, random-grid or unlabeled-goals.
    #[arg(long, default_value = "random-cross")]
    pub task: String,
    /// JSON task configuration; replaces the desk defaults of `--task`.
    #[arg(long)]
    pub task_config: Option<PathBuf>,
    #[arg(long)]
    pub agents: Option<usize>,
    #[arg(long)]
    pub min_groups: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub v_max: Option<f64>,
    #[arg(long)]
    pub link_failure: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 2000)]
    pub rollouts: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.99)]
    pub discount: f64,
    #[arg(long, default_value_t = 100.0)]
    pub clip_norm: f64,
    #[arg(long, default_value_t = 16)]
    pub val_rollouts: usize,
    #[arg(long, default_value_t = 10)]
    pub val_every: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyFlag {
    TfFull,
    Combined,
    Dist,
    HardAttn,
    NoComm,
}

#[derive(Args, Debug, Clone)]
pub struct PolicyArgs {
    #[arg(long, value_enum, default_value = "tf-full")]
    pub policy: PolicyFlag,
    /// Senders per agent for `dist` and `hard-attn`.
    #[arg(long)]
    pub k: Option<usize>,
    /// Program file for `combined`.
    #[arg(long)]
    pub program: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the fully connected transformer.
    TrainOracle {
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
        /// Training curve CSV.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Record (state, attention, message, action) tuples from a trained oracle.
    Collect {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 100)]
        rollouts: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search for a communication program per round.
    Synthesize {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long, default_value_t = 2)]
        rules: usize,
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
        #[arg(long, default_value_t = 5.0)]
        beta: f64,
        #[arg(long, default_value = "v1")]
        features: String,
        /// Only argmax rules.
        #[arg(long)]
        deterministic_only: bool,
        #[arg(long, default_value_t = 1)]
        samples_per_tuple: usize,
        /// Subsample the dataset to at most this many tuples (0 keeps all).
        #[arg(long, default_value_t = 0)]
        max_tuples: usize,
        #[arg(long)]
        out: PathBuf,
        /// Chain log CSV; defaults to `<out>.chain.csv`.
        #[arg(long)]
        chain: Option<PathBuf>,
    },
    /// Fine-tune a model with the programs' hard attention in the loop.
    Retrain {
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Loss and degree statistics of one policy.
    Evaluate {
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 100)]
        rollouts: usize,
        /// Consecutive seeds starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Reporting weight of the degree term.
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Label in the metrics; defaults to the policy flag.
        #[arg(long)]
        name: Option<String>,
        /// Recount every graph's degrees from its adjacency matrix.
        #[arg(long)]
        verify_degrees: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge metrics files into JSON, CSV and SVG comparisons.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Synthesize and evaluate over a grid of λ̃, rule counts and feature maps.
    Sweep {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.5, 0.7, 1.0])]
        lambdas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [2, 3, 4, 5])]
        rules: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = ["v1".to_string(), "v2".to_string()])]
        features: Vec<String>,
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
        #[arg(long, default_value_t = 5.0)]
        beta: f64,
        #[arg(long, default_value_t = 0)]
        max_tuples: usize,
        #[arg(long, default_value_t = 100)]
        rollouts: usize,
        #[arg(long)]
        out: PathBuf,
        /// Programs of the selected cell.
        #[arg(long)]
        best_program: Option<PathBuf>,
    },
    /// Per-step attention matrices of one rollout, as JSON lines.
    AttnDump {
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long)]
        model: PathBuf,
        /// Rollout index within the seed's stream.
        #[arg(long, default_value_t = 0)]
        index: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Every stage in order, each with its own manifest, into one directory.
    Pipeline {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 2000)]
        train_rollouts: usize,
        #[arg(long, default_value_t = 1000)]
        retrain_rollouts: usize,
        #[arg(long, default_value_t = 100)]
        collect_rollouts: usize,
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long, default_value_t = 2)]
        rules: usize,
        #[arg(long, default_value_t = 0)]
        max_tuples: usize,
        #[arg(long, default_value_t = 100)]
        eval_rollouts: usize,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// In-degree budget of the `hard-attn` and `dist` baselines; defaults to `--rules`.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Re-run a stage from its manifest and compare output hashes.
    Replay {
        manifest: PathBuf,
    },
}
