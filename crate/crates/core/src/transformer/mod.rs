//! The oracle: key, query, message and output networks with scaled
//! dot-product soft attention, optionally repeated for a second round.

mod plain;
mod tape;

use rand::Rng;
use serde::{Deserialize, Serialize};
use swarm_autodiff::{ParamStore, Tensor};

use crate::env::{TaskConfig, TaskKind};
use crate::error::{Error, Result};

pub use plain::{soft_attention, squash_action, Mlp, RoundState, StepOutput, Transformer};
pub use tape::{forward_tape, TapeStep};

/// Dimensions and task binding of a parameter file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub task_kind: TaskKind,
    pub rounds: usize,
    pub state_dim: usize,
    pub obs_dim: usize,
    pub key_dim: usize,
    pub msg_dim: usize,
    pub hidden: usize,
    pub internal_dim: usize,
    pub action_dim: usize,
    pub v_max: f64,
}

impl ModelHeader {
    pub fn for_task(cfg: &TaskConfig) -> Self {
        ModelHeader {
            task_kind: cfg.task_kind,
            rounds: cfg.rounds(),
            state_dim: cfg.state_dim(),
            obs_dim: 2,
            key_dim: 16,
            msg_dim: 16,
            hidden: 32,
            internal_dim: 16,
            action_dim: cfg.action_dim(),
            v_max: cfg.v_max,
        }
    }

    /// `(name, input width, output width)` for every network.
    pub fn nets(&self) -> Vec<(&'static str, usize, usize)> {
        let (sd, od) = (self.state_dim, self.obs_dim);
        let mut v = vec![
            ("key", sd + od, self.key_dim),
            ("query", sd, self.key_dim),
            ("msg", sd + od, self.msg_dim),
            ("out", sd + self.msg_dim, self.action_dim),
        ];
        if self.rounds >= 2 {
            v.extend([
                ("hidden", sd + self.msg_dim, self.internal_dim),
                ("msg2", self.internal_dim + od, self.msg_dim),
                ("key2", sd + od, self.key_dim),
                ("query2", sd, self.key_dim),
            ]);
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.rounds) {
            return Err(Error::Config(format!("rounds must be 1 or 2, got {}", self.rounds)));
        }
        if self.key_dim == 0 || self.msg_dim == 0 || self.hidden == 0 || self.state_dim == 0 || self.action_dim == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        if !(self.v_max > 0.0) {
            return Err(Error::Config("v_max must be positive".into()));
        }
        Ok(())
    }

    /// Checks that a task configuration fits these dimensions.
    pub fn check_task(&self, cfg: &TaskConfig) -> Result<()> {
        if self.task_kind != cfg.task_kind
            || self.state_dim != cfg.state_dim()
            || self.action_dim != cfg.action_dim()
            || self.rounds != cfg.rounds()
        {
            return Err(Error::Dimension(format!(
                "model built for {} (state {}, action {}, {} rounds) but task is {} (state {}, action {}, {} rounds)",
                self.task_kind.name(),
                self.state_dim,
                self.action_dim,
                self.rounds,
                cfg.task_kind.name(),
                cfg.state_dim(),
                cfg.action_dim(),
                cfg.rounds()
            )));
        }
        Ok(())
    }
}

/// Network weights plus the header that fixes their shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerParams {
    pub header: ModelHeader,
    pub store: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct ParamFile {
    header: ModelHeader,
    params: serde_json::Value,
}

impl TransformerParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(header: ModelHeader, rng: &mut R) -> Result<Self> {
        header.validate()?;
        let mut store = ParamStore::new();
        let h = header.hidden;
        for (name, din, dout) in header.nets() {
            for (layer, a, b) in [("l1", din, h), ("l2", h, dout)] {
                let bound = (6.0 / (a + b) as f64).sqrt();
                let w = (0..a * b).map(|_| rng.random_range(-bound..bound)).collect();
                store.insert(format!("{name}.{layer}.w"), Tensor::matrix(a, b, w)?)?;
                store.insert(format!("{name}.{layer}.b"), Tensor::zeros(&[b]))?;
            }
        }
        Ok(TransformerParams { header, store })
    }

    /// Every weight and bias set to zero.
    pub fn zeros(header: ModelHeader) -> Result<Self> {
        header.validate()?;
        let mut store = ParamStore::new();
        let h = header.hidden;
        for (name, din, dout) in header.nets() {
            store.insert(format!("{name}.l1.w"), Tensor::zeros(&[din, h]))?;
            store.insert(format!("{name}.l1.b"), Tensor::zeros(&[h]))?;
            store.insert(format!("{name}.l2.w"), Tensor::zeros(&[h, dout]))?;
            store.insert(format!("{name}.l2.b"), Tensor::zeros(&[dout]))?;
        }
        Ok(TransformerParams { header, store })
    }

    /// Verifies every expected tensor is present with the expected shape.
    pub fn validate(&self) -> Result<()> {
        self.header.validate()?;
        let h = self.header.hidden;
        let mut expected = 0;
        for (name, din, dout) in self.header.nets() {
            for (suffix, shape) in [
                ("l1.w", vec![din, h]),
                ("l1.b", vec![h]),
                ("l2.w", vec![h, dout]),
                ("l2.b", vec![dout]),
            ] {
                let key = format!("{name}.{suffix}");
                let t = self.store.get(&key).map_err(|_| Error::Dimension(format!("missing tensor `{key}`")))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Dimension(format!("`{key}` has shape {:?}, expected {shape:?}", t.shape())));
                }
                expected += 1;
            }
        }
        if expected != self.store.len() {
            return Err(Error::Dimension(format!("{} tensors present, {expected} expected", self.store.len())));
        }
        Ok(())
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::json!({ "header": self.header, "params": self.store.to_json_value() })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_json_value()).expect("params serialize")
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<Self> {
        let file: ParamFile = serde_json::from_value(value)?;
        let store = ParamStore::from_json_value(file.params)?;
        let p = TransformerParams { header: file.header, store };
        p.validate()?;
        Ok(p)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_json_value(serde_json::from_str(text)?)
    }

    /// Bitwise equality of all weights and of the header.
    pub fn same_as(&self, other: &TransformerParams) -> bool {
        self.header == other.header && self.store.same_values(&other.store)
    }
}

/// How a round's attention is replaced before aggregation.
#[derive(Clone, Debug, PartialEq)]
pub enum Override {
    /// Keep the soft attention.
    None,
    /// Zero every sender outside the receiver's list and renormalize; an empty list gives a zero row.
    Mask(Vec<Vec<usize>>),
    /// Explicit `n × n` attention, rows indexed by receiver.
    Rows(Vec<f64>),
}

impl Override {
    pub fn check(&self, n: usize) -> Result<()> {
        match self {
            Override::None => Ok(()),
            Override::Mask(sel) => {
                if sel.len() != n || sel.iter().flatten().any(|&j| j >= n) {
                    return Err(Error::Dimension(format!("mask for {} receivers over {n} agents", sel.len())));
                }
                Ok(())
            }
            Override::Rows(rows) => {
                if rows.len() != n * n {
                    return Err(Error::Dimension(format!("{} attention entries for {n} agents", rows.len())));
                }
                for row in rows.chunks(n.max(1)) {
                    let z: f64 = row.iter().sum();
                    let ok = row.iter().all(|v| v.is_finite() && *v >= 0.0) && (z == 0.0 || (z - 1.0).abs() < 1e-9);
                    if !ok {
                        return Err(Error::Config("override rows must be distributions over selected senders".into()));
                    }
                }
                Ok(())
            }
        }
    }

    /// 0/1 mask matrix for `Mask`.
    pub fn mask_matrix(sel: &[Vec<usize>], n: usize) -> Vec<f64> {
        let mut m = vec![0.0; n * n];
        for (i, s) in sel.iter().enumerate() {
            for &j in s {
                m[i * n + j] = 1.0;
            }
        }
        m
    }
}

/// Per-agent network inputs `s^i`, stacked row-major.
pub fn state_rows(state: &crate::env::GlobalState) -> Vec<f64> {
    (0..state.n_agents()).flat_map(|i| state.agent_state(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn header_nets_by_rounds() {
        let h1 = ModelHeader::for_task(&TaskConfig::desk(TaskKind::RandomCross));
        assert_eq!(h1.nets().len(), 4);
        assert_eq!(h1.state_dim, 4);
        let h2 = ModelHeader::for_task(&TaskConfig::desk(TaskKind::UnlabeledGoals));
        assert_eq!(h2.nets().len(), 8);
        assert_eq!(h2.state_dim, 12);
        assert_eq!(h2.action_dim, 5);
    }

    #[test]
    fn params_json_round_trip() {
        let h = ModelHeader::for_task(&TaskConfig::desk(TaskKind::UnlabeledGoals));
        let p = TransformerParams::init(h, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let back = TransformerParams::from_json(&p.to_json()).unwrap();
        assert!(p.same_as(&back));
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let h = ModelHeader::for_task(&TaskConfig::desk(TaskKind::RandomCross));
        let p = TransformerParams::init(h, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut v = p.to_json_value();
        v["header"]["key_dim"] = serde_json::json!(8);
        let e = TransformerParams::from_json_value(v).unwrap_err();
        assert!(e.to_string().starts_with("dimension mismatch:"), "{e}");
        let unl = TaskConfig::desk(TaskKind::UnlabeledGoals);
        assert!(p.header.check_task(&unl).is_err());
    }

    #[test]
    fn override_rows_are_checked() {
        assert!(Override::Rows(vec![0.5, 0.5, 0.0, 0.0]).check(2).is_ok());
        assert!(Override::Rows(vec![0.5, 0.6, 0.0, 1.0]).check(2).is_err());
        assert!(Override::Rows(vec![-0.5, 1.5, 0.0, 1.0]).check(2).is_err());
        assert!(Override::Mask(vec![vec![2], vec![]]).check(2).is_err());
    }
}
