use serde::{Deserialize, Serialize};

use super::Parameter;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Heavy-ball momentum for SGD; ignored by Adam.
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr,
            momentum,
            ..Default::default()
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig { lr, ..Default::default() }
    }
}

/// Stateful first-order optimizer. State slots follow the order of the
/// parameter slice passed to [`Optimizer::step`], which must stay fixed.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    t: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            t: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update using each trainable parameter's `tensor.grad`.
    /// Frozen parameters are skipped without being read or written.
    pub fn step(&mut self, params: &mut [Parameter]) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.trainable && p.tensor.grad.is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
            if self.config.kind == OptimizerKind::Adam {
                self.second = params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
            }
        } else if self.first.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer state tracks {} parameters, step received {}",
                self.first.len(),
                params.len()
            )));
        }
        self.t += 1;
        let c = self.config;
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let grad = p.tensor.grad.take().expect("checked above");
            if grad.len() != p.tensor.len() {
                return Err(Error::Shape(format!("gradient length mismatch for `{}`", p.name)));
            }
            match c.kind {
                OptimizerKind::Sgd => {
                    let vel = &mut self.first[i];
                    for ((w, g), v) in p.tensor.data_mut().iter_mut().zip(&grad).zip(vel.iter_mut()) {
                        *v = c.momentum * *v + g;
                        *w -= c.lr * *v;
                    }
                }
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - c.beta1.powi(self.t as i32);
                    let bc2 = 1.0 - c.beta2.powi(self.t as i32);
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (((w, g), m), v) in p.tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *w -= c.lr * mhat / (vhat.sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
