use std::rc::Rc;

use swarm_autodiff::{Bound, Tape, Tensor, Var};

use super::{ModelHeader, Override};
use crate::env::TaskKind;
use crate::error::{Error, Result};

/// Nodes produced by one differentiable forward step.
#[derive(Clone, Debug)]
pub struct TapeStep {
    /// `n × action_dim`.
    pub action: Var,
    pub pre_action: Var,
    /// Per round, `n × n` attention after overrides.
    pub attention: Vec<Var>,
}

fn mlp(tape: &mut Tape, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let w1 = b.get(&format!("{name}.l1.w"))?;
    let b1 = b.get(&format!("{name}.l1.b"))?;
    let w2 = b.get(&format!("{name}.l2.w"))?;
    let b2 = b.get(&format!("{name}.l2.b"))?;
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.tanh(h)?;
    let y = tape.matmul(h, w2)?;
    Ok(tape.add_row(y, b2)?)
}

/// Index map taking sender-major rows `j*n + i` to receiver-major rows `i*n + j`.
fn transpose_index(n: usize) -> Rc<Vec<usize>> {
    Rc::new((0..n * n).map(|r| (r % n) * n + r / n).collect())
}

/// Differentiable forward pass for `n` agents.
///
/// `s` is `n × state_dim`; `o` is `n·n × 2` with row `i*n + j` holding `o^{i,j}`.
pub fn forward_tape(
    tape: &mut Tape,
    b: &Bound,
    h: &ModelHeader,
    s: Var,
    o: Var,
    n: usize,
    overrides: &[Override],
) -> Result<TapeStep> {
    if overrides.len() != h.rounds {
        return Err(Error::Dimension(format!("{} overrides for {} rounds", overrides.len(), h.rounds)));
    }
    if tape.shape(s) != [n, h.state_dim] || tape.shape(o) != [n * n, h.obs_dim] {
        return Err(Error::Dimension(format!(
            "state {:?} and observations {:?} for {n} agents",
            tape.shape(s),
            tape.shape(o)
        )));
    }
    let t_idx = transpose_index(n);
    let s_rep = tape.repeat_rows(s, n)?;
    let pairs = tape.concat(&[s_rep, o])?;
    let inv_sqrt_d = 1.0 / (h.key_dim as f64).sqrt();
    let mut sender_pairs = pairs;
    let mut attention = Vec::with_capacity(h.rounds);
    let mut agg = None;
    for (r, ov) in overrides.iter().enumerate() {
        ov.check(n)?;
        let (kn, qn, mn) = if r == 0 { ("key", "query", "msg") } else { ("key2", "query2", "msg2") };
        let keys = mlp(tape, b, kn, pairs)?;
        let q = mlp(tape, b, qn, s)?;
        let q_rep = tape.repeat_rows(q, n)?;
        let prod = tape.mul(q_rep, keys)?;
        let logits = tape.sum_last(prod)?;
        let logits = tape.scale(logits, inv_sqrt_d)?;
        let logits = tape.reshape(logits, &[n, n])?;
        let soft = tape.softmax_last(logits)?;
        let alpha = match ov {
            Override::None => soft,
            Override::Mask(sel) => {
                let mask = tape.constant(Tensor::matrix(n, n, Override::mask_matrix(sel, n))?);
                let masked = tape.mul(soft, mask)?;
                tape.row_normalize(masked)?
            }
            Override::Rows(rows) => tape.constant(Tensor::matrix(n, n, rows.clone())?),
        };
        attention.push(alpha);
        let raw = mlp(tape, b, mn, sender_pairs)?;
        let msgs = tape.gather_rows(raw, t_idx.clone())?;
        let flat = tape.reshape(alpha, &[n * n])?;
        let weighted = tape.mul_col(msgs, flat)?;
        let a = tape.segment_sum(weighted, n)?;
        agg = Some(a);
        if r + 1 < h.rounds {
            let hin = tape.concat(&[s, a])?;
            let hid = mlp(tape, b, "hidden", hin)?;
            let h_rep = tape.repeat_rows(hid, n)?;
            sender_pairs = tape.concat(&[h_rep, o])?;
        }
    }
    let agg = agg.expect("at least one round");
    let oin = tape.concat(&[s, agg])?;
    let u = mlp(tape, b, "out", oin)?;
    let action = match h.task_kind {
        TaskKind::UnlabeledGoals => tape.softmax_last(u)?,
        _ => {
            let norms = tape.l2_norm(u)?;
            let ratio = tape.tanh_ratio(norms)?;
            let scaled = tape.mul_col(u, ratio)?;
            tape.scale(scaled, h.v_max)?
        }
    };
    Ok(TapeStep { action, pre_action: u, attention })
}
