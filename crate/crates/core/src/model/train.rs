//! Minibatch SGD with momentum, weight decay and exponential learning-rate
//! decay.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::contrastive::ContrastiveConfig;
use super::loss::{loss_and_grad, plan_contrastive, PixelSet};
use super::network::ModelParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Per-epoch learning-rate decay factor.
    pub gamma: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Pixels per step; 0 uses the whole set.
    pub batch_size: usize,
    /// Cap on steps per epoch; 0 means one full pass.
    pub max_steps_per_epoch: usize,
    pub contrastive: ContrastiveConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            gamma: 0.998,
            momentum: 0.95,
            weight_decay: 1e-4,
            epochs: 50,
            batch_size: 0,
            max_steps_per_epoch: 0,
            contrastive: ContrastiveConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        self.contrastive.validate()
    }

    /// Learning rate at a global epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.gamma.powi(epoch as i32)
    }
}

/// Momentum buffer, laid out like the parameters.
#[derive(Debug, Clone)]
pub struct Sgd {
    velocity: ModelParams,
}

impl Sgd {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            velocity: params.zeros_like(),
        }
    }

    /// `v = momentum * v + (g + wd * θ)`, then `θ -= lr * v`.
    pub fn step(&mut self, params: &mut ModelParams, grad: &ModelParams, lr: f64, momentum: f64, wd: f64) {
        let blocks = params.blocks_mut().into_iter().zip(self.velocity.blocks_mut()).zip(grad.blocks());
        for ((theta, v), g) in blocks {
            for ((t, vk), gk) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
                *vk = momentum * *vk + gk + wd * *t;
                *t -= lr * *vk;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Mean minibatch loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Global epoch index after training.
    pub epoch: usize,
}

/// Trains `params` on `set` for `cfg.epochs` epochs, starting the learning
/// rate schedule at global epoch `start_epoch`. Deterministic for a fixed
/// `seed`.
pub fn fit(
    params: &mut ModelParams,
    set: &PixelSet,
    raw_iou: Option<&[f64]>,
    cfg: &TrainConfig,
    start_epoch: usize,
    seed: u64,
) -> Result<FitReport> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::NoDecidedPixels);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Sgd::new(params);
    let n = set.len();
    let batch = if cfg.batch_size == 0 { n } else { cfg.batch_size.min(n) };
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        let epoch = start_epoch + e;
        let lr = cfg.lr_at(epoch);
        let full = batch == n;
        if !full {
            order.shuffle(&mut rng);
        }
        let mut steps = order.chunks(batch).count();
        if cfg.max_steps_per_epoch > 0 {
            steps = steps.min(cfg.max_steps_per_epoch);
        }
        let mut sum = 0.0;
        for idx in order.chunks(batch).take(steps) {
            let owned;
            let slice = if full {
                set
            } else {
                owned = set.subset(idx);
                &owned
            };
            let plan = if cfg.contrastive.weight > 0.0 {
                plan_contrastive(slice, raw_iou, &cfg.contrastive, &mut rng)
            } else {
                Default::default()
            };
            let (loss, grad) = loss_and_grad(params, slice, &plan, &cfg.contrastive)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: loss.total,
                });
            }
            opt.step(params, &grad, lr, cfg.momentum, cfg.weight_decay);
            sum += loss.total;
        }
        if !params.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: f64::NAN,
            });
        }
        let mean = sum / steps as f64;
        log::debug!("epoch {epoch}: loss {mean:.6} lr {lr:.6}");
        epoch_loss.push(mean);
    }
    Ok(FitReport {
        epoch_loss,
        epoch: start_epoch + cfg.epochs,
    })
}
