//! AdamW with decoupled weight decay.
//!
//! One instance per parameter group; the text and vision branches each get
//! their own so their learning rates stay independent. State (first and
//! second moments, step count) is keyed by parameter name and serializes
//! into checkpoints for bit-exact resume.

use std::collections::BTreeMap;

use crate::alignment::AlignmentModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step_count: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn state(&self) -> &BTreeMap<String, Moments> {
        &self.state
    }

    pub fn restore(&mut self, step_count: u64, state: BTreeMap<String, Moments>) {
        self.step_count = step_count;
        self.state = state;
    }

    /// Apply one update to the named parameters of `model`. Gradients are
    /// read from the parameters' own buffers; call after backward passes
    /// have been accumulated, and zero the grads afterwards.
    pub fn step(&mut self, model: &mut AlignmentModel, names: &[&'static str]) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for &name in names {
            let param = model
                .param_mut(name)
                .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
            let grad = param
                .grad()
                .ok_or_else(|| Error::Contract(format!("{name} has no gradient buffer")))?
                .to_vec();
            if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in {name} at element {i} (step {})",
                    self.step_count
                )));
            }
            let numel = grad.len();
            let moments = self
                .state
                .entry(name.to_string())
                .or_insert_with(|| Moments { m: vec![0.0; numel], v: vec![0.0; numel] });
            if moments.m.len() != numel {
                return Err(Error::Shape(format!(
                    "optimizer state for {name} has {} elements, parameter has {numel}",
                    moments.m.len()
                )));
            }
            let data = param.data_mut();
            for i in 0..numel {
                let g = grad[i];
                moments.m[i] = self.beta1 * moments.m[i] + (1.0 - self.beta1) * g;
                moments.v[i] = self.beta2 * moments.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = moments.m[i] / bias1;
                let v_hat = moments.v[i] / bias2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps)
                    + self.lr * self.weight_decay * data[i];
            }
        }
        Ok(())
    }
}
