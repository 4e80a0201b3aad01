use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{AfaError, Result};

/// A trainable tensor plus its accumulated gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub value: Tensor,
    #[serde(skip)]
    pub grad: Option<Tensor>,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        Parameter { value, grad: None }
    }
}

/// Adam with bias correction. One moment buffer per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Parameter]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            first: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update and clears every gradient.
    pub fn step(&mut self, params: &mut [Parameter]) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(AfaError::contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
            return Err(AfaError::contract(format!("parameter {i} has no gradient")));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad.take().expect("checked above");
            if grad.shape() != p.value.shape() {
                return Err(AfaError::Shape {
                    op: "adam_step",
                    left: p.value.shape().to_vec(),
                    right: grad.shape().to_vec(),
                });
            }
            for (((x, g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
