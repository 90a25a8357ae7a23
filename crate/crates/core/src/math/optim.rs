//! Named parameter storage and the Adam update rule.
//!
//! `ParamStore` keeps every trainable tensor under a stable name together
//! with a same-shape gradient accumulator and Adam moment buffers. The fit
//! loops place all slots on a fresh tape each epoch via [`ParamStore::bind`],
//! pull gradients back with [`grad`], then call [`ParamStore::adam_step`].

use std::collections::BTreeMap;

use super::autodiff::{Gradients, Tape, Value};
use super::matrix::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct Slot {
    value: Matrix,
    grad: Matrix,
    m: Matrix,
    v: Matrix,
}

/// Ordered (by name) collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
    steps: usize,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Matrix) {
        let (r, c) = value.shape();
        let prev = self.slots.insert(
            name.to_string(),
            Slot {
                value,
                grad: Matrix::zeros(r, c),
                m: Matrix::zeros(r, c),
                v: Matrix::zeros(r, c),
            },
        );
        assert!(prev.is_none(), "duplicate parameter slot '{name}'");
    }

    pub fn get(&self, name: &str) -> &Matrix {
        &self.slots.get(name).unwrap_or_else(|| panic!("no parameter slot '{name}'")).value
    }

    pub fn scalar(&self, name: &str) -> f64 {
        let m = self.get(name);
        assert!(m.is_scalar(), "parameter '{name}' is not a scalar");
        m.at(0, 0)
    }

    pub fn set(&mut self, name: &str, value: Matrix) {
        let slot = self.slots.get_mut(name).unwrap_or_else(|| panic!("no parameter slot '{name}'"));
        assert_eq!(slot.value.shape(), value.shape(), "shape change for '{name}'");
        slot.value = value;
    }

    pub fn grad_of(&self, name: &str) -> &Matrix {
        &self.slots.get(name).unwrap_or_else(|| panic!("no parameter slot '{name}'")).grad
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn zero_grads(&mut self) {
        for slot in self.slots.values_mut() {
            let (r, c) = slot.grad.shape();
            slot.grad = Matrix::zeros(r, c);
        }
    }

    /// Place every slot on the tape as a leaf, in name order.
    pub fn bind(&self, tape: &Tape) -> Bindings {
        Bindings {
            pairs: self
                .slots
                .iter()
                .map(|(name, slot)| (name.clone(), tape.leaf(slot.value.clone())))
                .collect(),
        }
    }

    /// Copy of every parameter value, for best-epoch snapshots.
    pub fn snapshot(&self) -> BTreeMap<String, Matrix> {
        self.slots
            .iter()
            .map(|(k, s)| (k.clone(), s.value.clone()))
            .collect()
    }

    pub fn restore(&mut self, snap: &BTreeMap<String, Matrix>) {
        for (name, value) in snap {
            self.set(name, value.clone());
        }
    }

    /// One Adam update from the accumulated gradients. `lr` must be positive;
    /// bias correction uses the internal step counter, which this increments.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if cfg.lr <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                cfg.lr
            )));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, slot) in self.slots.iter_mut() {
            if !slot.grad.is_finite() {
                return Err(Error::NonFiniteGrad { name: name.clone() });
            }
            for k in 0..slot.value.data().len() {
                let g = slot.grad.data()[k];
                let m = cfg.beta1 * slot.m.data()[k] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * slot.v.data()[k] + (1.0 - cfg.beta2) * g * g;
                slot.m.data_mut()[k] = m;
                slot.v.data_mut()[k] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                slot.value.data_mut()[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Parameter-name to tape-node mapping for one epoch's graph.
pub struct Bindings {
    pairs: Vec<(String, Value)>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Value {
        self.pairs
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("no bound parameter '{name}'"))
            .1
    }
}

/// Pull the gradients of `loss` w.r.t. every bound parameter into the store,
/// erroring (by name) on any non-finite entry. Parameters that do not reach
/// the loss get a zero gradient.
pub fn grad(tape: &Tape, loss: Value, bindings: &Bindings, store: &mut ParamStore) -> Result<()> {
    let grads: Gradients = tape.backward(loss)?;
    for (name, value) in &bindings.pairs {
        let g = grads.wrt(*value);
        if !g.is_finite() {
            return Err(Error::NonFiniteGrad { name: name.clone() });
        }
        let slot = store.slots.get_mut(name).expect("binding without slot");
        slot.grad = g;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
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
