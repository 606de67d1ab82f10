use mshvit_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::params::ParamSet;

/// `floor + ½(base − floor)(1 + cos(π·step/total))`.
pub fn cosine_schedule(step: usize, total_steps: usize, base: f64, floor: f64) -> Result<f64> {
    if step > total_steps {
        return Err(CoreError::Argument(format!("step {step} beyond total {total_steps}")));
    }
    if floor > base {
        return Err(CoreError::Argument(format!("floor {floor} above base {base}")));
    }
    if total_steps == 0 {
        return Ok(base);
    }
    let t = step as f64 / total_steps as f64;
    Ok(floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

fn check_grads(params: &ParamSet<f32>, grads: &[Tensor<f32>]) -> Result<()> {
    if grads.len() != params.len() {
        return Err(CoreError::Argument(format!("{} gradients for {} tensors", grads.len(), params.len())));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(CoreError::Argument(format!("gradient {:?} for tensor {name} {:?}", g.shape(), p.shape())));
        }
        if !g.all_finite() {
            return Err(CoreError::Numeric(name.to_string()));
        }
    }
    Ok(())
}

/// Adam with decoupled weight decay. Decay applies to matrices and kernels (rank ≥ 2) only.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet<f32>) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &[Tensor<f32>], lr: f64, weight_decay: f64) -> Result<()> {
        check_grads(params, grads)?;
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let wd = if p.rank() >= 2 { weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj as f64;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                let old = *w as f64;
                *w = (old - lr * update - lr * wd * old) as f32;
            }
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum: `v ← μv + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &ParamSet<f32>, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    /// `weight_decay` is added to the gradient (coupled L2) for rank ≥ 2 tensors.
    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &[Tensor<f32>], lr: f64, weight_decay: f64) -> Result<()> {
        check_grads(params, grads)?;
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let wd = if p.rank() >= 2 { weight_decay } else { 0.0 };
            let vel = &mut self.velocity[i];
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let old = *w as f64;
                vel[j] = self.momentum * vel[j] + gj as f64 + wd * old;
                *w = (old - lr * vel[j]) as f32;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    AdamW(AdamW),
    Sgd(Sgd),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamSet<f32>, momentum: f64) -> Self {
        match kind {
            OptimizerKind::AdamW => Optimizer::AdamW(AdamW::new(params)),
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(params, momentum)),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &[Tensor<f32>], lr: f64, weight_decay: f64) -> Result<()> {
        match self {
            Optimizer::AdamW(o) => o.step(params, grads, lr, weight_decay),
            Optimizer::Sgd(o) => o.step(params, grads, lr, weight_decay),
        }
    }
}
