use swarm_autodiff::{softmax_into, tanh_ratio, ParamStore};

use super::{ModelHeader, Override, TransformerParams};
use crate::env::{ObservationMatrix, TaskKind, Vec2};
use crate::error::{Error, Result};

/// Two-layer tanh network evaluated on plain slices.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub din: usize,
    pub dh: usize,
    pub dout: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Mlp {
    pub fn from_store(store: &ParamStore, name: &str) -> Result<Self> {
        let get = |s: &str| store.get(&format!("{name}.{s}")).cloned();
        let (w1, b1, w2, b2) = (get("l1.w")?, get("l1.b")?, get("l2.w")?, get("l2.b")?);
        Ok(Mlp {
            din: w1.shape()[0],
            dh: w1.shape()[1],
            dout: w2.shape()[1],
            w1: w1.into_data(),
            b1: b1.into_data(),
            w2: w2.into_data(),
            b2: b2.into_data(),
        })
    }

    /// First-layer pre-activation `x W1 + b1` into `pre` (length `dh`).
    pub fn pre_hidden(&self, x: &[f64], pre: &mut [f64]) {
        pre.copy_from_slice(&self.b1);
        for (k, xv) in x.iter().enumerate() {
            if *xv != 0.0 {
                let row = &self.w1[k * self.dh..(k + 1) * self.dh];
                for (p, w) in pre.iter_mut().zip(row) {
                    *p += xv * w;
                }
            }
        }
    }

    /// Second layer applied to an activated hidden vector.
    pub fn output(&self, hidden: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.b2);
        for (k, hv) in hidden.iter().enumerate() {
            let row = &self.w2[k * self.dout..(k + 1) * self.dout];
            for (o, w) in out.iter_mut().zip(row) {
                *o += hv * w;
            }
        }
    }

    pub fn forward_into(&self, x: &[f64], scratch: &mut Vec<f64>, out: &mut [f64]) {
        scratch.resize(self.dh, 0.0);
        self.pre_hidden(x, scratch);
        scratch.iter_mut().for_each(|v| *v = v.tanh());
        self.output(scratch, out);
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dout];
        self.forward_into(x, &mut Vec::new(), &mut out);
        out
    }
}

/// One round's intermediate products for every agent.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundState {
    /// `n × d`, row `i` is `q^i`.
    pub queries: Vec<f64>,
    /// `n·n × d`, row `i*n + j` is `k^{i,j}`.
    pub keys: Vec<f64>,
    /// `n·n × d_m`, row `i*n + j` is `m^{j→i}`.
    pub messages: Vec<f64>,
    /// `n × n`, entry `[i*n + j]` is `α^{j→i}` after any override.
    pub attention: Vec<f64>,
    /// Soft attention before any override.
    pub soft_attention: Vec<f64>,
    /// `n × d_m`, row `i` is `Σ_j α^{j→i} m^{j→i}`.
    pub aggregate: Vec<f64>,
    /// Sender inputs for the message network (`s` in round 1, `h` after).
    pub sender_inputs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub rounds: Vec<RoundState>,
    /// `n × action_dim` output-network values before squashing.
    pub pre_action: Vec<f64>,
    /// `n × action_dim` actions.
    pub action: Vec<f64>,
}

/// `u · v_max · tanh(‖u‖) / ‖u‖`, zero at the origin.
pub fn squash_action(u: Vec2, v_max: f64) -> Vec2 {
    let r = v_max * tanh_ratio(u[0].hypot(u[1]));
    [u[0] * r, u[1] * r]
}

/// `softmax(⟨q, k_j⟩ / √d)` over the given keys.
pub fn soft_attention(q: &[f64], keys: &[Vec<f64>], d: usize) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    let logits: Vec<f64> = keys.iter().map(|k| dot(q, k) * scale).collect();
    let mut out = Vec::with_capacity(keys.len());
    softmax_into(&logits, &mut out);
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Forward evaluation of trained parameters on plain `f64` buffers.
#[derive(Clone, Debug)]
pub struct Transformer {
    pub header: ModelHeader,
    key: Vec<Mlp>,
    query: Vec<Mlp>,
    msg: Vec<Mlp>,
    out: Mlp,
    hidden: Option<Mlp>,
}

impl Transformer {
    pub fn new(params: &TransformerParams) -> Result<Self> {
        params.validate()?;
        let s = &params.store;
        let two = params.header.rounds >= 2;
        let round_nets = |a: &str, b: &str| -> Result<Vec<Mlp>> {
            let mut v = vec![Mlp::from_store(s, a)?];
            if two {
                v.push(Mlp::from_store(s, b)?);
            }
            Ok(v)
        };
        Ok(Transformer {
            header: params.header.clone(),
            key: round_nets("key", "key2")?,
            query: round_nets("query", "query2")?,
            msg: round_nets("msg", "msg2")?,
            out: Mlp::from_store(s, "out")?,
            hidden: if two { Some(Mlp::from_store(s, "hidden")?) } else { None },
        })
    }

    pub fn out_net(&self) -> &Mlp {
        &self.out
    }

    pub fn hidden_net(&self) -> Option<&Mlp> {
        self.hidden.as_ref()
    }

    pub fn msg_net(&self, round: usize) -> &Mlp {
        &self.msg[round]
    }

    fn check_round(&self, round: usize) -> Result<()> {
        if round >= self.header.rounds {
            return Err(Error::Dimension(format!("round {} of a {}-round model", round + 1, self.header.rounds)));
        }
        Ok(())
    }

    /// Message from a sender with input `x` (its state in round 0, internal vector after) and observation `o`.
    pub fn message(&self, x: &[f64], o: Vec2, round: usize) -> Result<Vec<f64>> {
        self.check_round(round)?;
        let net = &self.msg[round];
        if x.len() + 2 != net.din {
            return Err(Error::Dimension(format!("message input of width {} for a {}-wide net", x.len() + 2, net.din)));
        }
        let mut inp = x.to_vec();
        inp.extend_from_slice(&o);
        Ok(net.forward(&inp))
    }

    pub fn key(&self, s: &[f64], o: Vec2, round: usize) -> Result<Vec<f64>> {
        self.check_round(round)?;
        let mut inp = s.to_vec();
        inp.extend_from_slice(&o);
        self.check_width(&self.key[round], inp.len())?;
        Ok(self.key[round].forward(&inp))
    }

    pub fn query(&self, s: &[f64], round: usize) -> Result<Vec<f64>> {
        self.check_round(round)?;
        self.check_width(&self.query[round], s.len())?;
        Ok(self.query[round].forward(s))
    }

    fn check_width(&self, net: &Mlp, w: usize) -> Result<()> {
        if w != net.din {
            return Err(Error::Dimension(format!("input of width {w} for a {}-wide net", net.din)));
        }
        Ok(())
    }

    /// Squashes an output-network value into an action.
    pub fn finish_action(&self, u: &[f64], out: &mut [f64]) {
        match self.header.task_kind {
            TaskKind::UnlabeledGoals => {
                let mut v = Vec::with_capacity(u.len());
                softmax_into(u, &mut v);
                out.copy_from_slice(&v);
            }
            _ => {
                let a = squash_action([u[0], u[1]], self.header.v_max);
                out.copy_from_slice(&a);
            }
        }
    }

    /// Action of one agent given its state and the round's messages and attention row.
    pub fn act(&self, s: &[f64], messages: &[Vec<f64>], attention: &[f64]) -> Result<Vec<f64>> {
        if messages.len() != attention.len() {
            return Err(Error::Dimension(format!("{} messages, {} weights", messages.len(), attention.len())));
        }
        let dm = self.header.msg_dim;
        let mut inp = s.to_vec();
        inp.resize(s.len() + dm, 0.0);
        for (m, a) in messages.iter().zip(attention) {
            if m.len() != dm {
                return Err(Error::Dimension(format!("message of width {}", m.len())));
            }
            for (acc, v) in inp[s.len()..].iter_mut().zip(m) {
                *acc += a * v;
            }
        }
        self.check_width(&self.out, inp.len())?;
        let u = self.out.forward(&inp);
        let mut a = vec![0.0; u.len()];
        self.finish_action(&u, &mut a);
        Ok(a)
    }

    /// Full forward pass. `choose(round, soft)` may replace each round's attention.
    pub fn forward<F>(&self, s: &[f64], obs: &ObservationMatrix, mut choose: F) -> Result<StepOutput>
    where
        F: FnMut(usize, &[f64]) -> Result<Override>,
    {
        let h = &self.header;
        let n = obs.n;
        let sd = h.state_dim;
        if s.len() != n * sd {
            return Err(Error::Dimension(format!("{} state values for {n} agents of width {sd}", s.len())));
        }
        let (d, dm) = (h.key_dim, h.msg_dim);
        let scale = 1.0 / (d as f64).sqrt();
        let mut scratch = Vec::new();
        let mut rounds = Vec::with_capacity(h.rounds);
        let mut sender_inputs = s.to_vec();
        let mut sender_dim = sd;
        for r in 0..h.rounds {
            let mut queries = vec![0.0; n * d];
            for i in 0..n {
                self.query[r].forward_into(&s[i * sd..(i + 1) * sd], &mut scratch, &mut queries[i * d..(i + 1) * d]);
            }
            let mut keys = vec![0.0; n * n * d];
            let mut messages = vec![0.0; n * n * dm];
            let mut inp = vec![0.0; sd + 2];
            let mut minp = vec![0.0; sender_dim + 2];
            for i in 0..n {
                inp[..sd].copy_from_slice(&s[i * sd..(i + 1) * sd]);
                minp[..sender_dim].copy_from_slice(&sender_inputs[i * sender_dim..(i + 1) * sender_dim]);
                for j in 0..n {
                    let o = obs.get(i, j);
                    inp[sd..].copy_from_slice(&o);
                    self.key[r].forward_into(&inp, &mut scratch, &mut keys[(i * n + j) * d..(i * n + j + 1) * d]);
                    // sender i, receiver j
                    minp[sender_dim..].copy_from_slice(&o);
                    self.msg[r].forward_into(&minp, &mut scratch, &mut messages[(j * n + i) * dm..(j * n + i + 1) * dm]);
                }
            }
            let mut soft = Vec::with_capacity(n * n);
            let mut logits = vec![0.0; n];
            for i in 0..n {
                let q = &queries[i * d..(i + 1) * d];
                for (j, l) in logits.iter_mut().enumerate() {
                    *l = dot(q, &keys[(i * n + j) * d..(i * n + j + 1) * d]) * scale;
                }
                softmax_into(&logits, &mut soft);
            }
            let ov = choose(r, &soft)?;
            ov.check(n)?;
            let attention = match &ov {
                Override::None => soft.clone(),
                Override::Rows(rows) => rows.clone(),
                Override::Mask(sel) => {
                    let mask = Override::mask_matrix(sel, n);
                    let mut a: Vec<f64> = soft.iter().zip(&mask).map(|(x, m)| x * m).collect();
                    for row in a.chunks_mut(n) {
                        let z: f64 = row.iter().sum();
                        if z != 0.0 {
                            row.iter_mut().for_each(|v| *v /= z);
                        }
                    }
                    a
                }
            };
            let mut aggregate = vec![0.0; n * dm];
            for i in 0..n {
                let agg = &mut aggregate[i * dm..(i + 1) * dm];
                for j in 0..n {
                    let w = attention[i * n + j];
                    if w != 0.0 {
                        for (acc, m) in agg.iter_mut().zip(&messages[(i * n + j) * dm..(i * n + j + 1) * dm]) {
                            *acc += w * m;
                        }
                    }
                }
            }
            let next_inputs = if r + 1 < h.rounds {
                let net = self.hidden.as_ref().expect("multi-round model has an internal network");
                let hd = net.dout;
                let mut hs = vec![0.0; n * hd];
                let mut hin = vec![0.0; sd + dm];
                for i in 0..n {
                    hin[..sd].copy_from_slice(&s[i * sd..(i + 1) * sd]);
                    hin[sd..].copy_from_slice(&aggregate[i * dm..(i + 1) * dm]);
                    net.forward_into(&hin, &mut scratch, &mut hs[i * hd..(i + 1) * hd]);
                }
                Some((hs, hd))
            } else {
                None
            };
            rounds.push(RoundState {
                queries,
                keys,
                messages,
                attention,
                soft_attention: soft,
                aggregate,
                sender_inputs: std::mem::take(&mut sender_inputs),
            });
            if let Some((hs, hd)) = next_inputs {
                sender_inputs = hs;
                sender_dim = hd;
            }
        }
        let ad = h.action_dim;
        let mut pre_action = vec![0.0; n * ad];
        let mut action = vec![0.0; n * ad];
        let last = rounds.last().expect("at least one round");
        let mut oin = vec![0.0; sd + dm];
        for i in 0..n {
            oin[..sd].copy_from_slice(&s[i * sd..(i + 1) * sd]);
            oin[sd..].copy_from_slice(&last.aggregate[i * dm..(i + 1) * dm]);
            self.out.forward_into(&oin, &mut scratch, &mut pre_action[i * ad..(i + 1) * ad]);
            self.finish_action(&pre_action[i * ad..(i + 1) * ad], &mut action[i * ad..(i + 1) * ad]);
        }
        Ok(StepOutput { rounds, pre_action, action })
    }

    /// Forward pass with one fixed override per round.
    pub fn forward_with(&self, s: &[f64], obs: &ObservationMatrix, overrides: &[Override]) -> Result<StepOutput> {
        if overrides.len() != self.header.rounds {
            return Err(Error::Dimension(format!("{} overrides for {} rounds", overrides.len(), self.header.rounds)));
        }
        self.forward(s, obs, |r, _| Ok(overrides[r].clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{observe, sample_initial, TaskConfig, TaskKind};
    use crate::transformer::state_rows;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use swarm_autodiff::Tensor;

    fn model(kind: TaskKind, seed: u64) -> (TaskConfig, TransformerParams, Transformer) {
        let cfg = TaskConfig::desk(kind);
        let p = TransformerParams::init(ModelHeader::for_task(&cfg), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let t = Transformer::new(&p).unwrap();
        (cfg, p, t)
    }

    fn world(cfg: &TaskConfig, seed: u64) -> (Vec<f64>, ObservationMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = sample_initial(cfg, &mut rng).unwrap();
        let o = observe(&s, cfg.obs_noise_sigma, &mut rng);
        (state_rows(&s), o)
    }

    #[test]
    fn squash_examples() {
        assert_eq!(squash_action([0.0, 0.0], 0.5), [0.0, 0.0]);
        let a = squash_action([1.0, 0.0], 1.0);
        assert!((a[0] - 0.7616).abs() < 1e-4 && a[1] == 0.0);
        let big = squash_action([3e3, 4e3], 0.5);
        assert!((big[0].hypot(big[1]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn attention_examples() {
        let row = soft_attention(&[1.0], &[vec![1.0], vec![0.0]], 1);
        assert!((row[0] - 0.7311).abs() < 1e-4 && (row[1] - 0.2689).abs() < 1e-4);
        assert_eq!(soft_attention(&[0.3, 0.2], &[vec![1.0, 1.0]], 2), vec![1.0]);
        let u = soft_attention(&[1.0, 2.0], &vec![vec![0.5, 0.5]; 4], 2);
        assert!(u.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn zero_weights_give_zero_messages() {
        let cfg = TaskConfig::desk(TaskKind::RandomCross);
        let p = TransformerParams::zeros(ModelHeader::for_task(&cfg)).unwrap();
        let t = Transformer::new(&p).unwrap();
        assert_eq!(t.message(&[1.0, 2.0, 3.0, 4.0], [5.0, 6.0], 0).unwrap(), vec![0.0; 16]);
        assert!(t.message(&[1.0, 2.0, 3.0, 4.0], [5.0, 6.0], 1).is_err());
        assert!(t.message(&[1.0, 2.0], [5.0, 6.0], 0).is_err());
    }

    #[test]
    fn forward_matches_single_agent_ops() {
        for kind in [TaskKind::RandomCross, TaskKind::UnlabeledGoals] {
            let (cfg, _, t) = model(kind, 1);
            let (s, obs) = world(&cfg, 2);
            let n = obs.n;
            let sd = t.header.state_dim;
            let out = t.forward(&s, &obs, |_, _| Ok(Override::None)).unwrap();
            let r0 = &out.rounds[0];
            for i in 0..n {
                let si = &s[i * sd..(i + 1) * sd];
                let q = t.query(si, 0).unwrap();
                let keys: Vec<Vec<f64>> = (0..n).map(|j| t.key(si, obs.get(i, j), 0).unwrap()).collect();
                let row = soft_attention(&q, &keys, 16);
                for j in 0..n {
                    assert!((row[j] - r0.attention[i * n + j]).abs() < 1e-14);
                }
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                if t.header.rounds == 1 {
                    let msgs: Vec<Vec<f64>> = (0..n)
                        .map(|j| t.message(&s[j * sd..(j + 1) * sd], obs.get(j, i), 0).unwrap())
                        .collect();
                    let a = t.act(si, &msgs, &row).unwrap();
                    for (x, y) in a.iter().zip(&out.action[i * 2..i * 2 + 2]) {
                        assert!((x - y).abs() < 1e-13);
                    }
                    assert!(a[0].hypot(a[1]) <= cfg.v_max);
                } else {
                    let w = &out.action[i * 5..(i + 1) * 5];
                    assert!(w.iter().all(|v| *v >= 0.0));
                    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn soft_override_is_identity() {
        let (cfg, _, t) = model(TaskKind::UnlabeledGoals, 3);
        let (s, obs) = world(&cfg, 4);
        let plain = t.forward(&s, &obs, |_, _| Ok(Override::None)).unwrap();
        let same = t.forward(&s, &obs, |_, soft| Ok(Override::Rows(soft.to_vec()))).unwrap();
        assert_eq!(plain, same);
        let all: Vec<Vec<usize>> = (0..obs.n).map(|_| (0..obs.n).collect()).collect();
        let masked = t.forward_with(&s, &obs, &[Override::Mask(all.clone()), Override::Mask(all)]).unwrap();
        for (a, b) in masked.action.iter().zip(&plain.action) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn one_hot_attention_passes_one_message() {
        let (_, _, t) = model(TaskKind::RandomCross, 5);
        let s = [0.1, 0.2, 0.3, 0.4];
        let msgs = vec![vec![0.3; 16], vec![-0.7; 16]];
        let a = t.act(&s, &msgs, &[0.0, 1.0]).unwrap();
        let b = t.act(&s, &msgs[1..], &[1.0]).unwrap();
        assert_eq!(a, b);
        let swapped = t.act(&s, &[msgs[1].clone(), msgs[0].clone()], &[1.0, 0.0]).unwrap();
        assert_eq!(a, swapped);
    }

    #[test]
    fn permuting_agents_permutes_outputs() {
        let (cfg, _, t) = model(TaskKind::RandomCross, 6);
        let (s, obs) = world(&cfg, 7);
        let n = obs.n;
        let perm: Vec<usize> = (0..n).rev().collect();
        let s2: Vec<f64> = perm.iter().flat_map(|&p| s[p * 4..(p + 1) * 4].to_vec()).collect();
        let mut data = vec![[0.0; 2]; n * n];
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = obs.get(perm[i], perm[j]);
            }
        }
        let obs2 = ObservationMatrix { n, data };
        let a = t.forward(&s, &obs, |_, _| Ok(Override::None)).unwrap();
        let b = t.forward(&s2, &obs2, |_, _| Ok(Override::None)).unwrap();
        for i in 0..n {
            for c in 0..2 {
                assert!((b.action[i * 2 + c] - a.action[perm[i] * 2 + c]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn zero_internal_network_leaves_only_observation_path() {
        let (cfg, mut p, _) = model(TaskKind::UnlabeledGoals, 8);
        for name in ["hidden.l1.w", "hidden.l1.b", "hidden.l2.w", "hidden.l2.b"] {
            let shape = p.store.get(name).unwrap().shape().to_vec();
            *p.store.get_mut(name).unwrap() = Tensor::zeros(&shape);
        }
        let t = Transformer::new(&p).unwrap();
        let (s, obs) = world(&cfg, 9);
        let out = t.forward(&s, &obs, |_, _| Ok(Override::None)).unwrap();
        let r1 = &out.rounds[1];
        assert!(r1.sender_inputs.iter().all(|v| *v == 0.0));
        let n = obs.n;
        let msg2 = t.msg_net(1);
        for i in 0..n {
            for j in 0..n {
                let o = obs.get(j, i);
                let want = msg2.forward(&[vec![0.0; 16], o.to_vec()].concat());
                assert_eq!(&r1.messages[(i * n + j) * 16..(i * n + j + 1) * 16], &want[..]);
            }
        }
    }
}
