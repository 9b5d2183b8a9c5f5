use std::collections::BTreeMap;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{ModelParams, Tensor};

/// Adam moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl OptimState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// `lr0 · 0.5^⌊epoch / halve_every⌋`
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * 0.5f64.powi((epoch / cfg.halve_every.max(1)) as i32)
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sum_squares).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NumericFault(format!("non-finite gradient for '{name}'")));
        }
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!("gradient {:?} for '{name}' {:?}", g.shape(), p.shape())));
        }
    }
    let (b1, b2) = cfg.betas;
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (name, g) in grads {
        let theta = params.params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for (((th, mi), vi), &gi) in theta
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *th -= lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once the dev loss has failed to improve for `patience` epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self { patience: patience.max(1), best: f64::INFINITY, best_epoch: None, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, dev_loss: f64) -> StopDecision {
        if dev_loss < self.best {
            self.best = dev_loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            StopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}
