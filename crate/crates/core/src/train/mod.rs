//! Adam training with step-halving learning rate, dev-loss early stopping,
//! seeded multi-round runs and checkpoints.

mod checkpoint;
mod optim;

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Fingerprint, CMCK_MAGIC, CMCK_VERSION};
pub use optim::{adam_step, clip_grad_norm, lr_at_epoch, EarlyStopper, OptimState, StopDecision};

use crate::data::{Label, ProtocolSet};
use crate::error::{Error, Result};
use crate::frontend::{FrontEnd, FrontendInput, FrontendKind};
use crate::model::Model;
use crate::nn::{cross_entropy, BackendKind, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub halve_every: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub betas: (f64, f64),
    pub epsilon: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Training segments are cut to at most this many seconds.
    pub max_segment_s: f64,
    pub rounds: usize,
    /// Set when a preset's learning rate was rescaled for the small model.
    pub desk_scale: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset("lfcc").expect("built-in preset")
    }
}

impl TrainConfig {
    /// `lfcc` (batch 64, lr 3e-4), `external` (batch 8, lr 1e-4, desk
    /// scaled) or `external_verbatim` (batch 8, lr 1e-6).
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self {
            lr0: 3e-4,
            halve_every: 10,
            batch_size: 64,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            betas: (0.9, 0.999),
            epsilon: 1e-8,
            grad_clip: 5.0,
            max_segment_s: 4.0,
            rounds: 1,
            desk_scale: false,
        };
        match name {
            "lfcc" => Ok(base),
            "external" => Ok(Self { lr0: 1e-4, batch_size: 8, desk_scale: true, ..base }),
            "external_verbatim" => Ok(Self { lr0: 1e-6, batch_size: 8, ..base }),
            other => Err(Error::Config(format!("unknown training preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("train.{what}")));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if self.patience == 0 || self.halve_every == 0 || self.batch_size == 0 {
            return bad("patience, halve_every and batch_size must be at least 1");
        }
        if self.max_epochs == 0 || self.rounds == 0 {
            return bad("max_epochs and rounds must be at least 1");
        }
        if !(self.max_segment_s > 0.0) || self.grad_clip < 0.0 || !(self.epsilon > 0.0) {
            return bad("max_segment_s and epsilon must be positive, grad_clip non-negative");
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("betas must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest dev loss.
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn model(&self, frontend: &FrontEnd) -> Result<Model> {
        Model::new(frontend.clone(), self.best.params.clone())
    }
}

pub fn fingerprint(model: &Model) -> Fingerprint {
    Fingerprint { input_dim: model.params.input_dim, ..expected_fingerprint(&model.frontend, model.params.backend) }
}

/// What a checkpoint must look like to run `backend` on `frontend`.
pub fn expected_fingerprint(frontend: &FrontEnd, backend: BackendKind) -> Fingerprint {
    Fingerprint {
        backend,
        frontend: frontend.kind(),
        projected: frontend.kind() != FrontendKind::Lfcc && frontend.config().project,
        input_dim: frontend.output_dim(),
    }
}

pub fn write_epoch_log(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("epoch,lr,train_loss,dev_loss\n");
    for e in log {
        text.push_str(&format!("{},{:e},{:.8},{:.8}\n", e.epoch, e.lr, e.train_loss, e.dev_loss));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Mean cross-entropy over whole items in inference mode.
pub fn mean_loss(model: &Model, items: &[(FrontendInput, Label)]) -> Result<f64> {
    let losses = items
        .par_iter()
        .map(|(input, label)| model.logits(input).map(|l| cross_entropy(l, *label)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Training segments for every trial, in protocol order.
pub fn load_training_items(frontend: &FrontEnd, set: &ProtocolSet, max_segment_s: f64) -> Result<Vec<(FrontendInput, Label)>> {
    let per_trial = set
        .records
        .par_iter()
        .map(|r| {
            frontend
                .training_segments(set, r, max_segment_s)
                .map(|segs| segs.into_iter().map(|s| (s, r.label)).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_trial.into_iter().flatten().collect())
}

/// Whole trials, in protocol order.
pub fn load_trials(frontend: &FrontEnd, set: &ProtocolSet) -> Result<Vec<(FrontendInput, Label)>> {
    set.records
        .par_iter()
        .map(|r| frontend.load_trial(set, r).map(|input| (input, r.label)))
        .collect()
}

/// Runs the epoch loop from `model`'s current parameters.
pub fn fit(cfg: &TrainConfig, mut model: Model, train: &[(FrontendInput, Label)], dev: &[(FrontendInput, Label)]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::InsufficientInput("training needs non-empty train and dev sets".into()));
    }
    let fp = fingerprint(&model);
    let mut optim = OptimState::new(&model.params);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best: Option<Checkpoint> = None;
    let mut log = Vec::new();
    let mut stopped_early = false;
    let shuffle_seed = model.params.seed;

    for epoch in 0..cfg.max_epochs {
        let lr = lr_at_epoch(cfg, epoch);
        let mut loss_sum = 0.0;
        for members in crate::data::batch_order(train.len(), cfg.batch_size, shuffle_seed, epoch as u64) {
            let inputs: Vec<&FrontendInput> = members.iter().map(|&i| &train[i].0).collect();
            let labels: Vec<usize> = members.iter().map(|&i| train[i].1.index()).collect();
            let mut tape = Tape::new();
            let vars = model.params.register(&mut tape);
            let out = model.forward(&mut tape, &vars, &inputs, true)?;
            let loss = tape.cross_entropy(out.logits, &labels)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NumericFault(format!("training loss diverged at epoch {epoch}")));
            }
            loss_sum += value * members.len() as f64;
            let mut grads = vars.gradients(&tape.backward(loss)?);
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(&mut grads, cfg.grad_clip);
            }
            adam_step(&mut model.params, &grads, &mut optim, lr, cfg)?;
            model.params.update_running_stats(&out.bn_stats);
        }
        let train_loss = loss_sum / train.len() as f64;
        let dev_loss = mean_loss(&model, dev)?;
        log::info!("epoch {epoch}: lr {lr:e} train {train_loss:.5} dev {dev_loss:.5}");
        log.push(EpochLog { epoch, lr, train_loss, dev_loss });
        match stopper.observe(epoch, dev_loss) {
            StopDecision::Improved => {
                best = Some(Checkpoint {
                    params: model.params.clone(),
                    optim: optim.clone(),
                    epoch,
                    best_dev_loss: dev_loss,
                    fingerprint: fp.clone(),
                })
            }
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    let best = best.ok_or_else(|| Error::NumericFault("dev loss never finite".into()))?;
    Ok(TrainOutcome { best, log, stopped_early })
}

/// Loads both sets through `frontend`, initializes from `seed` and fits.
pub fn train(cfg: &TrainConfig, frontend: &FrontEnd, backend: BackendKind, train_set: &ProtocolSet, dev_set: &ProtocolSet, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_items = load_training_items(frontend, train_set, cfg.max_segment_s)?;
    let dev_items = load_trials(frontend, dev_set)?;
    let model = Model::init(frontend.clone(), backend, seed)?;
    fit(cfg, model, &train_items, &dev_items)
}

/// `cfg.rounds` independent runs with seeds `cfg.seed + r`.
pub fn train_rounds(cfg: &TrainConfig, frontend: &FrontEnd, backend: BackendKind, train_set: &ProtocolSet, dev_set: &ProtocolSet) -> Result<Vec<TrainOutcome>> {
    cfg.validate()?;
    let train_items = load_training_items(frontend, train_set, cfg.max_segment_s)?;
    let dev_items = load_trials(frontend, dev_set)?;
    round_seeds(cfg)
        .map(|seed| fit(cfg, Model::init(frontend.clone(), backend, seed)?, &train_items, &dev_items))
        .collect()
}

pub fn round_seeds(cfg: &TrainConfig) -> impl Iterator<Item = u64> {
    let base = cfg.seed;
    (0..cfg.rounds as u64).map(move |r| base.wrapping_add(r))
}
