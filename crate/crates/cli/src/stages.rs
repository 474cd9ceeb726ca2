use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::Parser;
use serde_json::{json, Value};

use swarm_core::dsl::{parse_programs, print_programs, FeatureVersion, Program};
use swarm_core::env::{rollout, TaskConfig, TaskKind};
use swarm_core::harness::{self, EvalConfig, Metrics, RunManifest, SweepGrid};
use swarm_core::policy::{ModelPolicy, PolicyKind};
use swarm_core::synth::{collect_dataset, synthesize, write_synthesis_log, SynthConfig, SynthDataset};
use swarm_core::training::{retrain, train_oracle, write_curve_csv, TrainConfig, TrainReport};
use swarm_core::transformer::TransformerParams;
use swarm_core::Error;

use crate::args::{Cli, Command, PolicyArgs, PolicyFlag, TaskArgs, TrainArgs};
use crate::{config_err, CliError, CliResult};

/// Per-invocation state: the resolved seed and the files a stage touched.
pub struct Ctx {
    seed: u64,
    manifest: Option<PathBuf>,
    write_manifests: bool,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Ctx {
    pub fn new(seed: u64, manifest: Option<PathBuf>, write_manifests: bool) -> Self {
        Ctx { seed, manifest, write_manifests, inputs: Vec::new(), outputs: Vec::new() }
    }

    fn child(&self) -> Ctx {
        Ctx::new(self.seed, None, self.write_manifests)
    }

    fn input(&mut self, p: &Path) -> PathBuf {
        self.inputs.push(p.to_path_buf());
        p.to_path_buf()
    }

    /// Registers an output and makes sure its directory exists.
    fn output(&mut self, p: &Path) -> CliResult<PathBuf> {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        self.outputs.push(p.to_path_buf());
        Ok(p.to_path_buf())
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn open(path: &Path) -> CliResult<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()).into(),
        _ => e.into(),
    })
}

fn read_text(path: &Path) -> CliResult<String> {
    let mut s = String::new();
    std::io::Read::read_to_string(&mut open(path)?, &mut s)?;
    Ok(s)
}

fn load_model(ctx: &mut Ctx, path: &Path) -> CliResult<TransformerParams> {
    Ok(TransformerParams::from_json(&read_text(&ctx.input(path))?)?)
}

fn load_dataset(ctx: &mut Ctx, path: &Path) -> CliResult<SynthDataset> {
    Ok(SynthDataset::read_jsonl(BufReader::new(open(&ctx.input(path))?))?)
}

fn load_programs(ctx: &mut Ctx, path: &Path) -> CliResult<Vec<Program>> {
    let text = read_text(&ctx.input(path))?;
    parse_programs(&text).map_err(|e| Error::Program(e).into())
}

fn parse_features(s: &str) -> CliResult<FeatureVersion> {
    s.parse().map_err(config_err)
}

fn task_config(ctx: &mut Ctx, a: &TaskArgs) -> CliResult<TaskConfig> {
    let mut cfg = match &a.task_config {
        Some(p) => TaskConfig::from_json(&read_text(&ctx.input(p))?)?,
        None => TaskConfig::desk(a.task.parse::<TaskKind>()?),
    };
    if let Some(n) = a.agents {
        cfg.n_agents_per_group = n;
    }
    if let Some(g) = a.min_groups {
        cfg.min_groups = g;
    }
    if let Some(h) = a.horizon {
        cfg.horizon = h;
    }
    if let Some(v) = a.v_max {
        cfg.v_max = v;
    }
    if let Some(p) = a.link_failure {
        cfg.link_failure_prob = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn task_argv(a: &TaskArgs) -> Vec<String> {
    let mut v = vec!["--task".to_string(), a.task.clone()];
    let mut push = |flag: &str, val: Option<String>| {
        if let Some(val) = val {
            v.push(flag.to_string());
            v.push(val);
        }
    };
    push("--task-config", a.task_config.as_ref().map(|p| p.display().to_string()));
    push("--agents", a.agents.map(|x| x.to_string()));
    push("--min-groups", a.min_groups.map(|x| x.to_string()));
    push("--horizon", a.horizon.map(|x| x.to_string()));
    push("--v-max", a.v_max.map(|x| x.to_string()));
    push("--link-failure", a.link_failure.map(|x| x.to_string()));
    v
}

fn train_config(a: &TrainArgs, seed: u64) -> CliResult<TrainConfig> {
    let tc = TrainConfig {
        n_rollouts: a.rollouts,
        batch_size: a.batch,
        discount: a.discount,
        lr: a.lr,
        clip_norm: a.clip_norm,
        seed,
        val_rollouts: a.val_rollouts,
        val_every: a.val_every,
    };
    tc.validate()?;
    Ok(tc)
}

fn write_model(ctx: &mut Ctx, report: &TrainReport, out: &Path, curve: Option<&Path>) -> CliResult<()> {
    std::fs::write(ctx.output(out)?, report.params.to_json())?;
    if let Some(c) = curve {
        write_curve_csv(&report.curve, File::create(ctx.output(c)?)?)?;
    }
    println!(
        "wrote {} (best validation loss {:.4} at iteration {})",
        out.display(),
        report.best_val_loss,
        report.best_iteration
    );
    Ok(())
}

fn policy_kind(ctx: &mut Ctx, a: &PolicyArgs) -> CliResult<PolicyKind> {
    let need_k = || a.k.ok_or_else(|| config_err("--k is required for this policy"));
    Ok(match a.policy {
        PolicyFlag::TfFull => PolicyKind::TfFull,
        PolicyFlag::NoComm => PolicyKind::NoComm,
        PolicyFlag::Dist => PolicyKind::DistMask(need_k()?),
        PolicyFlag::HardAttn => PolicyKind::TopKAttn(need_k()?),
        PolicyFlag::Combined => {
            let p = a.program.as_ref().ok_or_else(|| config_err("--program is required for combined"))?;
            PolicyKind::Combined(load_programs(ctx, p)?)
        }
    })
}

fn policy_name(f: PolicyFlag) -> &'static str {
    match f {
        PolicyFlag::TfFull => "tf-full",
        PolicyFlag::Combined => "combined",
        PolicyFlag::Dist => "dist",
        PolicyFlag::HardAttn => "hard-attn",
        PolicyFlag::NoComm => "no-comm",
    }
}

fn model_policy(params: &TransformerParams, kind: PolicyKind, task: &TaskConfig) -> CliResult<ModelPolicy> {
    params.header.check_task(task)?;
    Ok(ModelPolicy::new(params, kind)?)
}

/// Runs one command and, unless disabled, writes its manifest.
pub fn dispatch(ctx: &mut Ctx, command: Command, argv: Vec<String>) -> CliResult<()> {
    let started = unix_now();
    let name = command_name(&command);
    let default_manifest = default_manifest(&command);
    let config = run_command(ctx, command)?;
    if !ctx.write_manifests {
        return Ok(());
    }
    let inputs: Vec<&Path> = ctx.inputs.iter().map(PathBuf::as_path).collect();
    let mut m = RunManifest::start(name, argv, config, ctx.seed, &inputs)?;
    m.started_unix = started;
    let outputs: Vec<&Path> = ctx.outputs.iter().map(PathBuf::as_path).collect();
    m.finish(&outputs)?;
    let path = ctx.manifest.clone().or(default_manifest).ok_or_else(|| config_err("no output to anchor the manifest"))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    m.write(&path)?;
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::TrainOracle { .. } => "train-oracle",
        Command::Collect { .. } => "collect",
        Command::Synthesize { .. } => "synthesize",
        Command::Retrain { .. } => "retrain",
        Command::Evaluate { .. } => "evaluate",
        Command::Report { .. } => "report",
        Command::Sweep { .. } => "sweep",
        Command::AttnDump { .. } => "attn-dump",
        Command::Pipeline { .. } => "pipeline",
        Command::Replay { .. } => "replay",
    }
}

fn default_manifest(c: &Command) -> Option<PathBuf> {
    let anchor = match c {
        Command::TrainOracle { out, .. }
        | Command::Collect { out, .. }
        | Command::Synthesize { out, .. }
        | Command::Retrain { out, .. }
        | Command::Evaluate { out, .. }
        | Command::Sweep { out, .. }
        | Command::AttnDump { out, .. } => out.clone(),
        Command::Report { out_dir, .. } => out_dir.join("report"),
        Command::Pipeline { out_dir, .. } => out_dir.join("pipeline"),
        Command::Replay { .. } => return None,
    };
    Some(with_suffix(&anchor, ".manifest.json"))
}

fn run_command(ctx: &mut Ctx, command: Command) -> CliResult<Value> {
    let seed = ctx.seed;
    match command {
        Command::TrainOracle { task, train, out, curve } => {
            let cfg = task_config(ctx, &task)?;
            let tc = train_config(&train, seed)?;
            let report = train_oracle(&cfg, &tc)?;
            write_model(ctx, &report, &out, curve.as_deref())?;
            Ok(json!({ "task": cfg, "train": tc }))
        }
        Command::Collect { task, model, rollouts, out } => {
            let cfg = task_config(ctx, &task)?;
            let params = load_model(ctx, &model)?;
            params.header.check_task(&cfg)?;
            let d = collect_dataset(&params, &cfg, rollouts, seed)?;
            d.write_jsonl(BufWriter::new(File::create(ctx.output(&out)?)?))?;
            println!("wrote {} ({} tuples)", out.display(), d.len());
            Ok(json!({ "task": cfg, "rollouts": rollouts }))
        }
        Command::Synthesize {
            dataset,
            lambda,
            rules,
            steps,
            beta,
            features,
            deterministic_only,
            samples_per_tuple,
            max_tuples,
            out,
            chain,
        } => {
            let d = load_dataset(ctx, &dataset)?;
            let cfg = SynthConfig {
                lambda,
                mcmc_steps: steps,
                beta,
                rules,
                features: parse_features(&features)?,
                allow_random_rules: !deterministic_only,
                samples_per_tuple,
                max_tuples,
                seed,
            };
            let syn = synthesize(&d, &cfg)?;
            let programs: Vec<Program> = syn.iter().map(|s| s.program.clone()).collect();
            std::fs::write(ctx.output(&out)?, print_programs(&programs))?;
            let chain = chain.unwrap_or_else(|| with_suffix(&out, ".chain.csv"));
            write_synthesis_log(&syn, BufWriter::new(File::create(ctx.output(&chain)?)?))?;
            for s in &syn {
                println!(
                    "round {}: J {:.4} (imitation {:.4}, degree {:.3})",
                    s.round, s.breakdown.j, s.breakdown.imitation, s.breakdown.degree
                );
            }
            println!("wrote {} and {}", out.display(), chain.display());
            Ok(json!({ "synth": cfg }))
        }
        Command::Retrain { task, train, model, program, out, curve } => {
            let cfg = task_config(ctx, &task)?;
            let tc = train_config(&train, seed)?;
            let params = load_model(ctx, &model)?;
            params.header.check_task(&cfg)?;
            let programs = load_programs(ctx, &program)?;
            let report = retrain(&params, &programs, &cfg, &tc)?;
            write_model(ctx, &report, &out, curve.as_deref())?;
            Ok(json!({ "task": cfg, "train": tc }))
        }
        Command::Evaluate { task, policy, model, rollouts, seeds, lambda, name, verify_degrees, out } => {
            let cfg = task_config(ctx, &task)?;
            let params = load_model(ctx, &model)?;
            let kind = policy_kind(ctx, &policy)?;
            let full = kind.is_full();
            let pol = model_policy(&params, kind, &cfg)?;
            let label = name.unwrap_or_else(|| policy_name(policy.policy).to_string());
            if seeds == 0 {
                return Err(config_err("--seeds must be at least 1"));
            }
            let mut all = Vec::new();
            for s in seed..seed + seeds {
                let ec = EvalConfig { n_rollouts: rollouts, seed: s, lambda, verify_degrees };
                let m = harness::evaluate(&pol, &label, full, &cfg, &ec)?;
                println!(
                    "{label} seed {s}: loss {:.4} ± {:.4}, max degree in {:.3} out {:.3} total {:.3}",
                    m.loss_mean, m.loss_std, m.in_deg_mean, m.out_deg_mean, m.total_deg_mean
                );
                all.push(m);
            }
            std::fs::write(ctx.output(&out)?, harness::to_json(&all))?;
            Ok(json!({ "task": cfg, "policy": label, "rollouts": rollouts, "seeds": seeds, "lambda": lambda }))
        }
        Command::Report { inputs, out_dir } => {
            let mut all: Vec<Metrics> = Vec::new();
            for p in &inputs {
                all.extend(harness::from_json(&read_text(&ctx.input(p))?)?);
            }
            if all.is_empty() {
                return Err(config_err("no metrics in the inputs"));
            }
            for p in harness::write_report(&all, &out_dir)? {
                ctx.output(&p)?;
            }
            println!("wrote report to {}", out_dir.display());
            Ok(json!({ "inputs": inputs.len() }))
        }
        Command::Sweep { dataset, lambdas, rules, features, steps, beta, max_tuples, rollouts, out, best_program } => {
            let d = load_dataset(ctx, &dataset)?;
            let grid = SweepGrid {
                lambdas,
                rules,
                features: features.iter().map(|f| parse_features(f)).collect::<CliResult<_>>()?,
            };
            let base = SynthConfig { mcmc_steps: steps, beta, max_tuples, seed, ..SynthConfig::default() };
            let ec = EvalConfig { n_rollouts: rollouts, seed, ..EvalConfig::default() };
            let task = d.header.task.clone();
            let r = harness::sweep(&d, &task, &grid, &base, &ec)?;
            std::fs::write(ctx.output(&out)?, serde_json::to_string_pretty(&r).map_err(Error::from)?)?;
            let best = &r.cells[r.best];
            println!(
                "best cell: λ̃ {} rules {} features {:?}, loss {:.4}, max degree {:.3}",
                best.lambda, best.rules, best.features, best.metrics.loss_mean, best.metrics.total_deg_mean
            );
            if let Some(p) = best_program {
                std::fs::write(ctx.output(&p)?, &best.programs)?;
            }
            Ok(json!({ "grid": grid, "synth": base, "rollouts": rollouts }))
        }
        Command::AttnDump { task, policy, model, index, out } => {
            let cfg = task_config(ctx, &task)?;
            let params = load_model(ctx, &model)?;
            let kind = policy_kind(ctx, &policy)?;
            let pol = model_policy(&params, kind, &cfg)?;
            let traj = rollout(&pol, &cfg, seed, index)?;
            let mut w = BufWriter::new(File::create(ctx.output(&out)?)?);
            for step in &traj.steps {
                let n = step.state.positions.len();
                for (r, att) in step.output.attention.iter().enumerate() {
                    let rows: Vec<&[f64]> = att.chunks(n).collect();
                    let senders = step.output.comm[r].selections();
                    let line = json!({ "t": step.t, "round": r, "n": n, "attention": rows, "senders": senders });
                    serde_json::to_writer(&mut w, &line).map_err(Error::from)?;
                    w.write_all(b"\n")?;
                }
            }
            w.flush()?;
            println!("wrote {} ({} steps)", out.display(), traj.steps.len());
            Ok(json!({ "task": cfg, "policy": policy_name(policy.policy), "index": index }))
        }
        Command::Pipeline {
            task,
            out_dir,
            train_rollouts,
            retrain_rollouts,
            collect_rollouts,
            steps,
            lambda,
            rules,
            max_tuples,
            eval_rollouts,
            seeds,
            k,
        } => {
            let cfg = task_config(ctx, &task)?;
            pipeline(
                ctx,
                &task,
                &out_dir,
                &PipelinePlan {
                    train_rollouts,
                    retrain_rollouts,
                    collect_rollouts,
                    steps,
                    lambda,
                    rules,
                    max_tuples,
                    eval_rollouts,
                    seeds,
                    k: k.unwrap_or(rules),
                },
            )?;
            Ok(json!({ "task": cfg }))
        }
        Command::Replay { .. } => Err(config_err("replay cannot be nested")),
    }
}

struct PipelinePlan {
    train_rollouts: usize,
    retrain_rollouts: usize,
    collect_rollouts: usize,
    steps: usize,
    lambda: f64,
    rules: usize,
    max_tuples: usize,
    eval_rollouts: usize,
    seeds: u64,
    k: usize,
}

fn pipeline(ctx: &mut Ctx, task: &TaskArgs, dir: &Path, plan: &PipelinePlan) -> CliResult<()> {
    let p = |name: &str| dir.join(name).display().to_string();
    let targs = task_argv(task);
    let oracle = p("oracle.json");
    let dataset = p("dataset.jsonl");
    let programs = p("programs.dsl");
    let retrained = p("retrained.json");
    let mut stages: Vec<Vec<String>> = Vec::new();
    let cmd = |head: &[&str], tail: &[String], with_task: bool| -> Vec<String> {
        let mut v: Vec<String> = head.iter().map(|s| s.to_string()).collect();
        if with_task {
            v.extend(targs.iter().cloned());
        }
        v.extend(tail.iter().cloned());
        v
    };
    let s = |x: &dyn ToString| x.to_string();
    stages.push(cmd(
        &["train-oracle"],
        &["--rollouts".into(), s(&plan.train_rollouts), "--out".into(), oracle.clone(), "--curve".into(), p("oracle.curve.csv")],
        true,
    ));
    stages.push(cmd(
        &["collect"],
        &["--model".into(), oracle.clone(), "--rollouts".into(), s(&plan.collect_rollouts), "--out".into(), dataset.clone()],
        true,
    ));
    stages.push(cmd(
        &["synthesize"],
        &[
            "--dataset".into(),
            dataset,
            "--lambda".into(),
            s(&plan.lambda),
            "--rules".into(),
            s(&plan.rules),
            "--steps".into(),
            s(&plan.steps),
            "--max-tuples".into(),
            s(&plan.max_tuples),
            "--out".into(),
            programs.clone(),
        ],
        false,
    ));
    stages.push(cmd(
        &["retrain"],
        &[
            "--model".into(),
            oracle.clone(),
            "--program".into(),
            programs.clone(),
            "--rollouts".into(),
            s(&plan.retrain_rollouts),
            "--out".into(),
            retrained.clone(),
            "--curve".into(),
            p("retrained.curve.csv"),
        ],
        true,
    ));
    let evals: [(&str, &str, &str, Vec<String>); 6] = [
        ("tf-full", &oracle, "tf-full", vec![]),
        ("prog", &oracle, "combined", vec!["--program".into(), programs.clone()]),
        ("prog-retrained", &retrained, "combined", vec!["--program".into(), programs.clone()]),
        ("hard-attn", &oracle, "hard-attn", vec!["--k".into(), s(&plan.k)]),
        ("dist", &oracle, "dist", vec!["--k".into(), s(&plan.k)]),
        ("no-comm", &oracle, "no-comm", vec![]),
    ];
    let mut metric_files = Vec::new();
    for (name, model, flag, extra) in evals {
        let out = p(&format!("metrics/{name}.json"));
        let mut tail = vec![
            "--model".into(),
            model.to_string(),
            "--policy".into(),
            flag.into(),
            "--name".into(),
            name.into(),
            "--rollouts".into(),
            s(&plan.eval_rollouts),
            "--seeds".into(),
            s(&plan.seeds),
            "--out".into(),
            out.clone(),
        ];
        tail.extend(extra);
        stages.push(cmd(&["evaluate"], &tail, true));
        metric_files.push(out);
    }
    let mut report = vec!["report".to_string(), "--inputs".into()];
    report.extend(metric_files);
    report.extend(["--out-dir".into(), p("report")]);
    stages.push(report);

    for mut argv in stages {
        argv.extend(["--seed".into(), ctx.seed.to_string()]);
        println!("== swarm {}", argv.join(" "));
        let cli = Cli::try_parse_from(std::iter::once("swarm".to_string()).chain(argv.iter().cloned()))
            .map_err(|e| config_err(format!("pipeline stage: {e}")))?;
        let mut sub = ctx.child();
        dispatch(&mut sub, cli.command, argv)?;
        ctx.outputs.extend(sub.outputs);
    }
    Ok(())
}

/// Re-runs the manifest's command with its seed and thread count, then compares outputs.
pub fn replay(m: &RunManifest) -> CliResult<()> {
    std::env::set_current_dir(&m.cwd).map_err(|_| Error::MissingInput(m.cwd.clone()))?;
    let changed = m.changed_inputs()?;
    if !changed.is_empty() {
        return Err(CliError::Mismatch(format!("inputs changed since the run: {}", join(&changed))));
    }
    let cli = Cli::try_parse_from(std::iter::once("swarm".to_string()).chain(m.argv.iter().cloned()))
        .map_err(|e| config_err(format!("recorded argv: {e}")))?;
    let mut ctx = Ctx::new(m.seed, None, false);
    dispatch(&mut ctx, cli.command, m.argv.clone())?;
    let changed = m.changed_outputs()?;
    if !changed.is_empty() {
        return Err(CliError::Mismatch(format!("outputs differ: {}", join(&changed))));
    }
    println!("replay of `{}`: {} outputs reproduced bit for bit", m.command, m.outputs.len());
    Ok(())
}

fn join(ps: &[PathBuf]) -> String {
    ps.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
}
