//! Named trainable parameters and the SGD optimizer.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{contract_err, Result};
use crate::tensor::Tensor;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_store_id() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of uniquely named parameters.
///
/// Each store carries a process-unique identity so that a tape can route
/// gradients back to the store its leaves came from. Cloning a store yields
/// a new identity.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self { id: fresh_store_id(), params: self.params.clone(), by_name: self.by_name.clone() }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { id: fresh_store_id(), params: Vec::new(), by_name: HashMap::new() }
    }

    pub(crate) fn store_id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return contract_err(format!("duplicate parameter name `{name}`"));
        }
        let grad = Tensor::zeros(value.shape());
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Swaps in a new value (possibly of a different shape) and resets its
    /// gradient.
    pub fn replace(&mut self, id: ParamId, value: Tensor) {
        let p = &mut self.params[id.0];
        p.grad = Tensor::zeros(value.shape());
        p.value = value;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of scalar values across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// `(name, shape)` pairs in registration order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect()
    }
}

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
///
/// Velocities are keyed by parameter name, so one optimizer may drive several
/// stores as long as their names are disjoint.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0) || !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
            return contract_err(format!(
                "invalid SGD settings lr={lr} momentum={momentum} weight_decay={weight_decay}"
            ));
        }
        Ok(Self { lr, momentum, weight_decay, velocity: HashMap::new() })
    }

    /// `v <- momentum * v + (grad + weight_decay * value)`, then
    /// `value <- value - lr * v`.
    pub fn step(&mut self, store: &mut ParamStore) {
        for p in store.iter_mut() {
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; p.value.len()]);
            if v.len() != p.value.len() {
                *v = vec![0.0; p.value.len()];
            }
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                v[i] = self.momentum * v[i] + grad[i] + self.weight_decay * value[i];
                value[i] -= self.lr * v[i];
            }
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }
}
