use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
    /// Frozen tensors (e.g. normalisation statistics) are stored and
    /// checkpointed but never receive gradients or updates.
    pub trainable: bool,
}

impl Parameter {
    fn new(value: Tensor, trainable: bool) -> Self {
        let n = value.len();
        Self {
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            trainable,
        }
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Named tensors with Adam moments, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    params: BTreeMap<String, Parameter>,
    step: u64,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<(), TensorError> {
        if self.params.contains_key(name) {
            return Err(TensorError::Usage(format!("duplicate parameter name '{name}'")));
        }
        self.params.insert(name.to_string(), Parameter::new(value, trainable));
        Ok(())
    }

    pub(crate) fn insert_full(&mut self, name: String, p: Parameter) -> Result<(), TensorError> {
        if p.m.len() != p.value.len() || p.v.len() != p.value.len() {
            return Err(TensorError::Checkpoint(format!("moment shapes of '{name}' do not match its value")));
        }
        if self.params.insert(name.clone(), p).is_some() {
            return Err(TensorError::Checkpoint(format!("duplicate parameter name '{name}'")));
        }
        Ok(())
    }

    pub(crate) fn restore_parts(value: Tensor, m: Vec<f64>, v: Vec<f64>, trainable: bool) -> Parameter {
        let n = value.len();
        Parameter { value, grad: vec![0.0; n], m, v, trainable }
    }

    pub fn remove(&mut self, name: &str) -> Option<Parameter> {
        self.params.remove(name)
    }

    pub(crate) fn insert_parameter(&mut self, name: String, p: Parameter) -> Result<(), TensorError> {
        self.insert_full(name, p)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.values().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, c: f64) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g *= c);
        }
    }

    /// One bias-corrected Adam update over every trainable tensor, then clear
    /// all gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for p in self.params.values_mut().filter(|p| p.trainable) {
            let Parameter { value, grad, m, v, .. } = p;
            for (((x, &g), m), v) in value.data_mut().iter_mut().zip(grad.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        self.zero_grad();
    }
}
