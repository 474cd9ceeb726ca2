use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{AdError, Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    value: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Named parameter tensors plus Adam moment estimates.
///
/// Iteration order is the lexicographic order of names, which fixes the
/// order in which gradients are accumulated and applied.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
    step: u64,
}

/// Parameter nodes bound onto one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var, AdError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| AdError::UnknownParam(name.to_string()))
    }

    /// Collects the gradient of every bound parameter.
    pub fn gradients(&self, grads: &Gradients) -> ParamGrads {
        ParamGrads(self.vars.iter().map(|(k, v)| (k.clone(), grads.wrt(*v))).collect())
    }
}

/// Per-parameter gradients, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads(pub BTreeMap<String, Tensor>);

impl ParamGrads {
    /// Adds `other` into `self` in name order.
    pub fn accumulate(&mut self, other: &ParamGrads) -> Result<(), AdError> {
        for (name, g) in &other.0 {
            match self.0.get_mut(name) {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(AdError::ShapeMismatch {
                            op: "accumulate",
                            detail: name.clone(),
                        });
                    }
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.0.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.0.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm does not exceed `max_norm`; returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}

#[derive(Serialize, Deserialize)]
struct SerEntry {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), AdError> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            return Err(AdError::DuplicateParam(name));
        }
        if !value.is_finite() {
            return Err(AdError::NonFinite { op: "insert" });
        }
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        self.slots.insert(name, Slot { value, m, v });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, AdError> {
        self.slots
            .get(name)
            .map(|s| &s.value)
            .ok_or_else(|| AdError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, AdError> {
        self.slots
            .get_mut(name)
            .map(|s| &mut s.value)
            .ok_or_else(|| AdError::UnknownParam(name.to_string()))
    }

    /// First and second moment estimates of a parameter.
    pub fn moments(&self, name: &str) -> Result<(&Tensor, &Tensor), AdError> {
        self.slots
            .get(name)
            .map(|s| (&s.m, &s.v))
            .ok_or_else(|| AdError::UnknownParam(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn num_values(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    /// Places every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .slots
            .iter()
            .map(|(k, s)| (k.clone(), tape.leaf(s.value.clone())))
            .collect();
        Bound { vars }
    }

    /// Places every parameter on `tape` as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .slots
            .iter()
            .map(|(k, s)| (k.clone(), tape.constant(s.value.clone())))
            .collect();
        Bound { vars }
    }

    /// One bias-corrected Adam update that *descends* along `grads`.
    pub fn adam_step(&mut self, grads: &ParamGrads, cfg: &AdamConfig) -> Result<(), AdError> {
        for (name, g) in &grads.0 {
            let slot = self
                .slots
                .get(name)
                .ok_or_else(|| AdError::UnknownParam(name.clone()))?;
            if slot.value.shape() != g.shape() {
                return Err(AdError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("{name}: {:?} vs {:?}", slot.value.shape(), g.shape()),
                });
            }
            if !g.is_finite() {
                return Err(AdError::NonFinite { op: "adam_step" });
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for (name, slot) in self.slots.iter_mut() {
            let g = grads.0.get(name);
            let n = slot.value.len();
            for i in 0..n {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let m = &mut slot.m.data_mut()[i];
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
                let mhat = *m / bc1;
                let v = &mut slot.v.data_mut()[i];
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
                let vhat = *v / bc2;
                slot.value.data_mut()[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// JSON object mapping each name to its shape and flat values.
    pub fn to_json_value(&self) -> serde_json::Value {
        let map: BTreeMap<&str, SerEntry> = self
            .slots
            .iter()
            .map(|(k, s)| {
                (
                    k.as_str(),
                    SerEntry {
                        shape: s.value.shape().to_vec(),
                        values: s.value.data().to_vec(),
                    },
                )
            })
            .collect();
        serde_json::to_value(map).expect("param store serializes")
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<Self, AdError> {
        let map: BTreeMap<String, SerEntry> =
            serde_json::from_value(value).map_err(|e| AdError::Format(e.to_string()))?;
        let mut store = ParamStore::new();
        for (k, e) in map {
            store.insert(k, Tensor::new(e.shape, e.values)?)?;
        }
        Ok(store)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_json_value()).expect("param store serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, AdError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| AdError::Format(e.to_string()))?;
        Self::from_json_value(value)
    }

    /// True when every parameter value matches bitwise.
    pub fn same_values(&self, other: &ParamStore) -> bool {
        self.slots.len() == other.slots.len()
            && self.slots.iter().zip(&other.slots).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
