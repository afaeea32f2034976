//! AdamW with decoupled weight decay over named parameter groups, and the
//! linear-warmup / cosine-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A set of tensors sharing one peak learning rate and weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
    pub peak_lr: f64,
    pub weight_decay: f64,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, peak_lr: f64, weight_decay: f64) -> Result<Self> {
        if !(peak_lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "peak_lr {} must be > 0",
                peak_lr
            )));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight_decay {} must be >= 0",
                weight_decay
            )));
        }
        Ok(Self {
            name: name.into(),
            names: Vec::new(),
            params: Vec::new(),
            peak_lr,
            weight_decay,
        })
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.params.push(t);
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if warmup_steps == 0 || warmup_steps >= total_steps {
            return Err(Error::InvalidArgument(format!(
                "schedule needs 0 < warmup ({}) < total ({})",
                warmup_steps, total_steps
            )));
        }
        Ok(Self {
            warmup_steps,
            total_steps,
        })
    }
}

/// Learning rate at `step`: linear ramp from 0 to `peak_lr` over the warmup,
/// then cosine decay to 0 at `total_steps`. Past the end the rate is 0.
pub fn lr_at(step: usize, schedule: &Schedule, peak_lr: f64) -> f64 {
    if step > schedule.total_steps {
        log::warn!(
            "step {} past schedule end {}; learning rate clamped to 0",
            step,
            schedule.total_steps
        );
        return 0.0;
    }
    if step <= schedule.warmup_steps {
        return peak_lr * step as f64 / schedule.warmup_steps as f64;
    }
    let span = (schedule.total_steps - schedule.warmup_steps) as f64;
    let progress = (step - schedule.warmup_steps) as f64 / span;
    peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

/// First and second moments, one pair of buffers per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub m: Vec<Vec<Tensor>>,
    pub v: Vec<Vec<Tensor>>,
}

impl AdamWState {
    pub fn new(groups: &[ParamGroup], config: AdamWConfig) -> Self {
        let zeros = |g: &ParamGroup| g.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            m: groups.iter().map(zeros).collect(),
            v: groups.iter().map(zeros).collect(),
        }
    }
}

/// One AdamW update for every group. `grads` mirrors the group/tensor layout.
/// `step` counts updates from 1 and drives both the bias correction and the
/// schedule.
pub fn adamw_step(
    groups: &mut [ParamGroup],
    grads: &[Vec<Tensor>],
    state: &mut AdamWState,
    step: usize,
    schedule: &Schedule,
) -> Result<()> {
    if step == 0 {
        return Err(Error::InvalidArgument(
            "optimizer step counts from 1".into(),
        ));
    }
    if grads.len() != groups.len() || state.m.len() != groups.len() {
        return Err(Error::Shape(format!(
            "{} gradient groups for {} parameter groups",
            grads.len(),
            groups.len()
        )));
    }
    for (gi, (group, g)) in groups.iter().zip(grads).enumerate() {
        if g.len() != group.params.len() {
            return Err(Error::Shape(format!(
                "group {}: {} gradients for {} parameters",
                group.name,
                g.len(),
                group.params.len()
            )));
        }
        for (pi, (p, gp)) in group.params.iter().zip(g).enumerate() {
            if p.shape() != gp.shape() || state.m[gi][pi].shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "{}: parameter {:?} vs gradient {:?}",
                    group.names[pi],
                    p.shape(),
                    gp.shape()
                )));
            }
        }
    }

    let AdamWConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for (gi, group) in groups.iter_mut().enumerate() {
        let lr = lr_at(step, schedule, group.peak_lr);
        let decay = 1.0 - lr * group.weight_decay;
        for (pi, p) in group.params.iter_mut().enumerate() {
            let m = state.m[gi][pi].data_mut();
            let v = state.v[gi][pi].data_mut();
            let g = grads[gi][pi].data();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / norm;
        for t in grads.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }
    norm
}
