use serde::{Deserialize, Serialize};

use crate::model::Params;
use crate::numerics::Tensor;

use super::ObjectiveError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    /// Adam with variance rectification during warmup.
    Radam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Radam,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 200.0,
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their joint norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm.is_finite() && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.map(|v| v * s);
        }
    }
    norm
}

/// First and second moment estimates for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Clips, then applies one update in place. Returns the pre-clip norm.
    pub fn step(&mut self, params: &mut Params, mut grads: Vec<Tensor>) -> Result<f64, ObjectiveError> {
        if grads.len() != params.tensors.len() {
            return Err(ObjectiveError::Divergence(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.tensors.len()
            )));
        }
        let norm = clip_global_norm(&mut grads, self.config.grad_clip);
        if !norm.is_finite() {
            return Err(ObjectiveError::Divergence("non-finite gradient".into()));
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let rect = match c.kind {
            OptimizerKind::Adam => Some(1.0),
            OptimizerKind::Radam => radam_rectifier(c.beta2, t),
        };
        for ((p, g), (m, v)) in params
            .tensors
            .iter_mut()
            .zip(&grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let mut data = p.to_vec();
            for (k, &gk) in g.data().iter().enumerate() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                data[k] -= match rect {
                    Some(r) => c.lr * r * mhat / ((v[k] / bc2).sqrt() + c.eps),
                    None => c.lr * mhat,
                };
            }
            *p = Tensor::new(p.shape().to_vec(), data)?;
        }
        Ok(norm)
    }
}

/// Variance rectification term; `None` while the approximated SMA length is
/// too short for the adaptive step to be trusted.
fn radam_rectifier(beta2: f64, t: f64) -> Option<f64> {
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let b2t = beta2.powf(t);
    let rho = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
    if rho > 5.0 {
        let num = (rho - 4.0) * (rho - 2.0) * rho_inf;
        let den = (rho_inf - 4.0) * (rho_inf - 2.0) * rho;
        Some((num / den).sqrt())
    } else {
        None
    }
}
