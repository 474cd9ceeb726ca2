use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use swarm_core::dsl::{parse_program, parse_programs, print_program, print_programs, FeatureVersion, Program};
use swarm_core::env::{observe, rollout, sample_initial, Policy, StepInput, TaskConfig, TaskKind};
use swarm_core::policy::{hard_attention, ModelPolicy, PolicyKind};
use swarm_core::synth::{FeatureStats, Proposer};
use swarm_core::transformer::{state_rows, ModelHeader, Override, TransformerParams};

/// A program reached by a random walk of proposals, so predicates of every depth show up.
fn random_program(version: FeatureVersion, k: usize, walk: usize, seed: u64) -> Program {
    let pr = Proposer::new(version, FeatureStats::unit(version), true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = pr.initial(k, &mut rng);
    for _ in 0..walk {
        p = pr.propose(&p, &mut rng).0;
    }
    p
}

fn small_task(kind: TaskKind, horizon: usize) -> TaskConfig {
    let mut cfg = TaskConfig::desk(kind);
    cfg.horizon = horizon;
    cfg
}

fn model(cfg: &TaskConfig, seed: u64) -> TransformerParams {
    TransformerParams::init(ModelHeader::for_task(cfg), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn version(v2: bool) -> FeatureVersion {
    if v2 {
        FeatureVersion::V2
    } else {
        FeatureVersion::V1
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn printed_programs_parse_back(seed in any::<u64>(), k in 1usize..6, walk in 0usize..60, v2 in any::<bool>()) {
        let p = random_program(version(v2), k, walk, seed);
        let text = print_program(&p);
        let q = parse_program(&text).unwrap();
        prop_assert_eq!(&q, &p);
        prop_assert_eq!(print_program(&q), text);
    }

    #[test]
    fn program_lists_parse_back(seed in any::<u64>(), rounds in 1usize..4) {
        let ps: Vec<Program> = (0..rounds).map(|r| random_program(FeatureVersion::V1, 2, 25, seed ^ r as u64)).collect();
        prop_assert_eq!(parse_programs(&print_programs(&ps)).unwrap(), ps);
    }

    #[test]
    fn hardened_rows_keep_only_selected_mass(
        row in prop::collection::vec(1e-6f64..1.0, 2..12),
        mask in prop::collection::vec(any::<bool>(), 12),
    ) {
        let sel: Vec<usize> = (0..row.len()).filter(|&j| mask[j]).collect();
        let h = hard_attention(&row, &sel);
        for (j, v) in h.iter().enumerate() {
            if !sel.contains(&j) {
                prop_assert_eq!(*v, 0.0);
            }
        }
        let s: f64 = h.iter().sum();
        if sel.is_empty() {
            prop_assert!(h.iter().all(|v| *v == 0.0));
        } else {
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn program_graphs_respect_the_rule_count(seed in any::<u64>(), k in 1usize..5, walk in 0usize..30, grid in any::<bool>()) {
        let kind = if grid { TaskKind::RandomGrid } else { TaskKind::RandomCross };
        let cfg = small_task(kind, 4);
        let prog = random_program(FeatureVersion::V1, k, walk, seed);
        let pol = ModelPolicy::new(&model(&cfg, seed), PolicyKind::Combined(vec![prog])).unwrap();
        let traj = rollout(&pol, &cfg, seed, 0).unwrap();
        for step in &traj.steps {
            let n = step.state.n_agents();
            for (comm, att) in step.output.comm.iter().zip(&step.output.attention) {
                let sel = comm.selections().unwrap();
                let g = comm.graph(n);
                prop_assert!(g.degrees().iter().all(|(inn, _)| *inn <= k));
                for i in 0..n {
                    prop_assert!(sel[i].len() <= k && !sel[i].contains(&i));
                    let row = &att[i * n..(i + 1) * n];
                    let s: f64 = row.iter().sum();
                    for (j, v) in row.iter().enumerate() {
                        if !sel[i].contains(&j) {
                            prop_assert_eq!(*v, 0.0);
                        }
                    }
                    prop_assert!(sel[i].is_empty() && s == 0.0 || (s - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn unselected_messages_do_not_reach_the_action(seed in any::<u64>(), walk in 0usize..30) {
        let cfg = small_task(TaskKind::RandomCross, 1);
        let p = model(&cfg, seed);
        let prog = random_program(FeatureVersion::V1, 2, walk, seed);
        let pol = ModelPolicy::new(&p, PolicyKind::Combined(vec![prog])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = sample_initial(&cfg, &mut rng).unwrap();
        let obs = observe(&state, cfg.obs_noise_sigma, &mut rng);
        let out = pol.step(&StepInput { state: &state, obs: &obs, cfg: &cfg }, &mut ChaCha8Rng::seed_from_u64(!seed)).unwrap();
        let soft = pol.model.forward(&state_rows(&state), &obs, |_, _| Ok(Override::None)).unwrap();
        let n = state.n_agents();
        let dm = p.header.msg_dim;
        let sel = out.comm[0].selections().unwrap();
        for i in 0..n {
            // act from the selected senders' messages alone
            let msgs: Vec<Vec<f64>> = sel[i].iter().map(|&j| out.messages[0][(i * n + j) * dm..(i * n + j + 1) * dm].to_vec()).collect();
            let h = hard_attention(&soft.rounds[0].attention[i * n..(i + 1) * n], &sel[i]);
            let w: Vec<f64> = sel[i].iter().map(|&j| h[j]).collect();
            let a = pol.model.act(&state.agent_state(i), &msgs, &w).unwrap();
            for (x, y) in a.iter().zip(&out.action.0[i]) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn baseline_selections_have_exact_size(seed in any::<u64>(), k in 1usize..12) {
        let cfg = small_task(TaskKind::RandomCross, 2);
        let p = model(&cfg, seed);
        for kind in [PolicyKind::DistMask(k), PolicyKind::TopKAttn(k)] {
            let pol = ModelPolicy::new(&p, kind).unwrap();
            let traj = rollout(&pol, &cfg, seed, 1).unwrap();
            for step in &traj.steps {
                let n = step.state.n_agents();
                for comm in &step.output.comm {
                    for (i, s) in comm.selections().unwrap().iter().enumerate() {
                        prop_assert_eq!(s.len(), k.min(n - 1));
                        prop_assert!(!s.contains(&i));
                    }
                }
            }
            prop_assert_eq!(pol.rounds(), p.header.rounds);
        }
    }
}
