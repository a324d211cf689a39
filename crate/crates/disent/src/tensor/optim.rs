//! First-order optimizers over named parameter lists.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// SGD or Adam with bias-corrected moments. Moment buffers are keyed by
/// parameter name and created lazily on first step.
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub step_count: u64,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Optimizer {
    pub fn sgd(learning_rate: f32) -> Optimizer {
        Optimizer {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 0.0,
            step_count: 0,
            moments: HashMap::new(),
        }
    }

    pub fn adam(learning_rate: f32) -> Optimizer {
        Optimizer {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            moments: HashMap::new(),
        }
    }

    /// Applies one update. `params` pairs each named parameter with its
    /// gradient; missing moments are initialized to zero.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor, &[f32])]) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        for (name, p, g) in params.iter_mut() {
            if p.numel() != g.len() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: p.dims().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    let lr = self.learning_rate;
                    p.update(|i, v| *v -= lr * g[i]);
                }
                OptimizerKind::Adam => {
                    let (m, v) = self
                        .moments
                        .entry(name.clone())
                        .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                    let (b1, b2) = (self.beta1, self.beta2);
                    let bc1 = 1.0 - b1.powi(t as i32);
                    let bc2 = 1.0 - b2.powi(t as i32);
                    let lr = self.learning_rate;
                    let eps = self.epsilon;
                    p.update(|i, val| {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        *val -= lr * m_hat / (v_hat.sqrt() + eps);
                    });
                }
            }
        }
        Ok(())
    }

    /// Moment buffers as named tensors for checkpointing, prefixed with
    /// `opt.m.` / `opt.v.`.
    pub fn state_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut names: Vec<&String> = self.moments.keys().collect();
        names.sort();
        let mut out = Vec::new();
        for name in names {
            let (m, v) = &self.moments[name];
            out.push((format!("opt.m.{name}"), vec![m.len()], m.clone()));
            out.push((format!("opt.v.{name}"), vec![v.len()], v.clone()));
        }
        out
    }

    pub fn restore_moment(&mut self, name: &str, m: Vec<f32>, v: Vec<f32>) {
        self.moments.insert(name.to_string(), (m, v));
    }
}
