//! SGD and Adam with per-group learning rates.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr_extractor: f64,
    pub lr_classifier: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Full passes over the data (stage 1).
    pub epochs: usize,
    /// Update steps (stage 2).
    pub iterations: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr_extractor: 1e-3,
            lr_classifier: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 10,
            iterations: 300,
            batch_size: 128,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lr_extractor", self.lr_extractor)?;
        positive("lr_classifier", self.lr_classifier)?;
        positive("epsilon", self.epsilon)?;
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Parameters sharing one learning rate. Each tensor must carry a gradient.
pub struct ParamGroup<'a> {
    pub name: &'static str,
    pub lr: f64,
    pub params: Vec<&'a mut Tensor>,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    steps: u64,
    moments: HashMap<(&'static str, usize), (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            kind: cfg.kind,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            steps: 0,
            moments: HashMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every group. Nothing is modified if any
    /// gradient is missing or non-finite.
    pub fn step(&mut self, groups: &mut [ParamGroup<'_>]) -> Result<()> {
        for g in groups.iter() {
            for (i, p) in g.params.iter().enumerate() {
                let grad = p
                    .grad()
                    .ok_or_else(|| Error::State(format!("parameter {i} of group {} has no gradient", g.name)))?;
                if grad.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient in parameter group {}", g.name)));
                }
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        for g in groups.iter_mut() {
            for (i, p) in g.params.iter_mut().enumerate() {
                let (data, grad) = p.data_and_grad_mut();
                let grad = grad.expect("checked above");
                match self.kind {
                    OptimizerKind::Sgd => {
                        data.iter_mut().zip(grad).for_each(|(w, d)| *w -= g.lr * d);
                    }
                    OptimizerKind::Adam => {
                        let (m, v) = self
                            .moments
                            .entry((g.name, i))
                            .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
                        let c1 = 1.0 - self.beta1.powi(t);
                        let c2 = 1.0 - self.beta2.powi(t);
                        for j in 0..grad.len() {
                            m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * grad[j];
                            v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * grad[j] * grad[j];
                            let mh = m[j] / c1;
                            let vh = v[j] / c2;
                            data[j] -= g.lr * mh / (vh.sqrt() + self.epsilon);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
