//! Executable policies built on a trained transformer: full soft attention,
//! program-selected hard attention, and the distance / top-k / no-comm baselines.

use std::fmt;

use crate::dsl::{program_selections, Program};
use crate::env::{apply_link_failure, Comm, GlobalAction, Policy, PolicyOutput, SimRng, StepInput, Vec2};
use crate::error::{Error, Result};
use crate::transformer::{state_rows, Override, Transformer, TransformerParams};

/// Masks a soft row to `sel` and renormalizes; an empty or zero-mass selection gives a zero row.
pub fn hard_attention(row: &[f64], sel: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    for &j in sel {
        out[j] = row[j];
    }
    let z: f64 = out.iter().sum();
    if z != 0.0 {
        out.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// The `k` agents nearest to `i`, ties by lowest id, self excluded.
///
/// `points` may be absolute positions or agent `i`'s row of relative observations.
pub fn dist_mask_select(points: &[Vec2], i: usize, k: usize) -> Vec<usize> {
    let base = points[i];
    let mut others: Vec<(f64, usize)> = (0..points.len())
        .filter(|&j| j != i)
        .map(|j| ((points[j][0] - base[0]).hypot(points[j][1] - base[1]), j))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut sel: Vec<usize> = others.into_iter().take(k).map(|(_, j)| j).collect();
    sel.sort_unstable();
    sel
}

/// The `k` senders with the largest soft attention, ties by lowest id, self excluded.
pub fn topk_attention_select(row: &[f64], i: usize, k: usize) -> Vec<usize> {
    let mut others: Vec<usize> = (0..row.len()).filter(|&j| j != i).collect();
    others.sort_by(|a, b| row[*b].total_cmp(&row[*a]).then(a.cmp(b)));
    others.truncate(k);
    others.sort_unstable();
    others
}

#[derive(Clone, Debug, PartialEq)]
pub enum PolicyKind {
    /// Soft attention over every agent.
    TfFull,
    /// One program per round, hardening the attention to the selected senders.
    Combined(Vec<Program>),
    /// Hard attention over the `k` nearest agents.
    DistMask(usize),
    /// Hard attention over the `k` largest soft-attention senders.
    TopKAttn(usize),
    /// No messages are received.
    NoComm,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::TfFull => "tf-full",
            PolicyKind::Combined(_) => "combined",
            PolicyKind::DistMask(_) => "dist",
            PolicyKind::TopKAttn(_) => "hard-attn",
            PolicyKind::NoComm => "no-comm",
        }
    }

    /// True when degree statistics are not meaningful (every agent hears every agent).
    pub fn is_full(&self) -> bool {
        matches!(self, PolicyKind::TfFull)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-round communication plan for one step, drawn in round order from `rng`.
///
/// Returns the delivered communication and the matching attention override.
pub fn plan_round(
    kind: &PolicyKind,
    round: usize,
    input: &StepInput,
    soft: &[f64],
    rng: &mut SimRng,
) -> Result<(Comm, Override)> {
    let n = input.state.n_agents();
    let p_fail = input.cfg.link_failure_prob;
    let hard = |requested: Vec<Vec<usize>>, rng: &mut SimRng| {
        let delivered = apply_link_failure(&requested, p_fail, rng);
        (Comm::Hard(delivered.clone()), Override::Mask(delivered))
    };
    Ok(match kind {
        PolicyKind::TfFull => {
            if p_fail > 0.0 {
                let requested: Vec<Vec<usize>> = (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect();
                let delivered = apply_link_failure(&requested, p_fail, rng);
                let with_self = delivered
                    .iter()
                    .enumerate()
                    .map(|(i, d)| {
                        let mut v = d.clone();
                        v.push(i);
                        v.sort_unstable();
                        v
                    })
                    .collect();
                (Comm::SoftSubset(delivered), Override::Mask(with_self))
            } else {
                (Comm::Full, Override::None)
            }
        }
        PolicyKind::Combined(programs) => {
            let program = programs
                .get(round)
                .ok_or_else(|| Error::Dimension(format!("no program for round {}", round + 1)))?;
            hard(program_selections(program, input.state, input.obs, rng), rng)
        }
        PolicyKind::DistMask(k) => hard((0..n).map(|i| dist_mask_select(input.obs.row(i), i, *k)).collect(), rng),
        PolicyKind::TopKAttn(k) => hard(
            (0..n).map(|i| topk_attention_select(&soft[i * n..(i + 1) * n], i, *k)).collect(),
            rng,
        ),
        PolicyKind::NoComm => (Comm::Hard(vec![Vec::new(); n]), Override::Mask(vec![Vec::new(); n])),
    })
}

/// A transformer paired with a communication scheme.
#[derive(Clone, Debug)]
pub struct ModelPolicy {
    pub model: Transformer,
    pub kind: PolicyKind,
}

impl ModelPolicy {
    pub fn new(params: &TransformerParams, kind: PolicyKind) -> Result<Self> {
        let model = Transformer::new(params)?;
        if let PolicyKind::Combined(ps) = &kind {
            if ps.len() != model.header.rounds {
                return Err(Error::Dimension(format!(
                    "{} programs for a {}-round model",
                    ps.len(),
                    model.header.rounds
                )));
            }
            for p in ps {
                p.validate().map_err(Error::Config)?;
            }
        }
        if let PolicyKind::DistMask(k) | PolicyKind::TopKAttn(k) = kind {
            if k == 0 {
                return Err(Error::Config("k must be at least 1".into()));
            }
        }
        Ok(ModelPolicy { model, kind })
    }
}

impl Policy for ModelPolicy {
    fn rounds(&self) -> usize {
        self.model.header.rounds
    }

    fn step(&self, input: &StepInput, rng: &mut SimRng) -> Result<PolicyOutput> {
        let s = state_rows(input.state);
        let mut comm = Vec::with_capacity(self.rounds());
        let out = self.model.forward(&s, input.obs, |r, soft| {
            let (c, ov) = plan_round(&self.kind, r, input, soft, rng)?;
            comm.push(c);
            Ok(ov)
        })?;
        let ad = self.model.header.action_dim;
        let action = GlobalAction(out.action.chunks(ad).map(<[f64]>::to_vec).collect());
        Ok(PolicyOutput {
            comm,
            attention: out.rounds.iter().map(|r| r.attention.clone()).collect(),
            messages: out.rounds.into_iter().map(|r| r.messages).collect(),
            action,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{observe, rollout, sample_initial, ObservationMatrix, TaskConfig, TaskKind};
    use crate::transformer::ModelHeader;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hard_attention_examples() {
        let row = [0.5, 0.3, 0.2];
        assert_eq!(hard_attention(&row, &[0]), vec![1.0, 0.0, 0.0]);
        let h = hard_attention(&row, &[0, 2]);
        assert!((h[0] - 0.7143).abs() < 1e-4 && h[1] == 0.0 && (h[2] - 0.2857).abs() < 1e-4);
        let all = hard_attention(&row, &[0, 1, 2]);
        for (a, b) in all.iter().zip(&row) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(hard_attention(&row, &[]), vec![0.0; 3]);
    }

    #[test]
    fn distance_selection() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]];
        assert_eq!(dist_mask_select(&pts, 1, 1), vec![0]);
        assert_eq!(dist_mask_select(&pts, 1, 2), vec![0, 2]);
        let eq = [[0.0, 0.0], [-1.0, 0.0], [1.0, 0.0]];
        assert_eq!(dist_mask_select(&eq, 0, 1), vec![1]);
    }

    #[test]
    fn topk_selection() {
        let row = [0.5, 0.3, 0.2];
        assert_eq!(topk_attention_select(&row, 2, 2), vec![0, 1]);
        assert_eq!(topk_attention_select(&row, 2, 1), vec![0]);
        assert_eq!(topk_attention_select(&[0.25; 4], 1, 2), vec![0, 2]);
    }

    fn setup(kind: TaskKind) -> (TaskConfig, TransformerParams) {
        let cfg = TaskConfig::desk(kind);
        let p = TransformerParams::init(ModelHeader::for_task(&cfg), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (cfg, p)
    }

    #[test]
    fn selections_respect_k_and_exclude_self() {
        let (mut cfg, p) = setup(TaskKind::RandomCross);
        cfg.group_presence_prob = 1.0;
        for kind in [PolicyKind::DistMask(3), PolicyKind::TopKAttn(3)] {
            let pol = ModelPolicy::new(&p, kind).unwrap();
            let tr = rollout(&pol, &cfg, 1, 0).unwrap();
            for s in &tr.steps {
                for (i, sel) in s.output.comm[0].selections().unwrap().iter().enumerate() {
                    assert_eq!(sel.len(), 3);
                    assert!(!sel.contains(&i));
                }
            }
        }
    }

    #[test]
    fn no_comm_equals_output_on_zero_message() {
        let (cfg, p) = setup(TaskKind::RandomCross);
        let pol = ModelPolicy::new(&p, PolicyKind::NoComm).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let state = sample_initial(&cfg, &mut rng).unwrap();
        let obs = observe(&state, cfg.obs_noise_sigma, &mut rng);
        let out = pol.step(&StepInput { state: &state, obs: &obs, cfg: &cfg }, &mut rng).unwrap();
        for i in 0..state.n_agents() {
            let a = pol.model.act(&state.agent_state(i), &[], &[]).unwrap();
            assert_eq!(a, out.action.0[i]);
        }
    }

    #[test]
    fn top_k_can_concentrate_out_degree() {
        // Receivers all attend most to agent 0.
        let n = 5;
        let mut soft = vec![0.1; n * n];
        for i in 0..n {
            soft[i * n] = 0.6;
        }
        let cfg = TaskConfig::desk(TaskKind::RandomCross);
        let state = crate::env::GlobalState {
            positions: vec![[0.0, 0.0]; n],
            goals: vec![[0.0, 0.0]; n],
            group_id: vec![0; n],
            goal_order: vec![],
        };
        let obs = ObservationMatrix { n, data: vec![[0.0, 0.0]; n * n] };
        let input = StepInput { state: &state, obs: &obs, cfg: &cfg };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (comm, _) = plan_round(&PolicyKind::TopKAttn(1), 0, &input, &soft, &mut rng).unwrap();
        let stats = comm.graph(n).degree_stats();
        assert_eq!(stats.max_in, 1);
        assert_eq!(stats.max_out, n - 1);
    }

    #[test]
    fn combined_consumes_only_selected_messages() {
        let (cfg, p) = setup(TaskKind::RandomCross);
        let prog = crate::dsl::parse_program("#dsl v1 features=V1 rules=2\nargmax(map(-d, filter(true, l)))\nrandom(filter(d >= 2, l))\n").unwrap();
        let pol = ModelPolicy::new(&p, PolicyKind::Combined(vec![prog])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let state = sample_initial(&cfg, &mut rng).unwrap();
        let obs = observe(&state, cfg.obs_noise_sigma, &mut rng);
        let input = StepInput { state: &state, obs: &obs, cfg: &cfg };
        let out = pol.step(&input, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let n = state.n_agents();
        let sel = out.comm[0].selections().unwrap();
        for i in 0..n {
            assert!(sel[i].len() <= 2);
            let msgs: Vec<Vec<f64>> = sel[i].iter().map(|&j| out.messages[0][(i * n + j) * 16..(i * n + j + 1) * 16].to_vec()).collect();
            let soft: Vec<f64> = {
                let full = pol.model.forward(&state_rows(&state), &obs, |_, _| Ok(Override::None)).unwrap();
                full.rounds[0].attention[i * n..(i + 1) * n].to_vec()
            };
            let h = hard_attention(&soft, &sel[i]);
            let w: Vec<f64> = sel[i].iter().map(|&j| h[j]).collect();
            let a = pol.model.act(&state.agent_state(i), &msgs, &w).unwrap();
            for (x, y) in a.iter().zip(&out.action.0[i]) {
                assert!((x - y).abs() < 1e-13);
            }
        }
    }
}
