//! Supervised contrastive loss over pixel embeddings, with anchors drawn from
//! the classes the model currently handles worst.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    /// Weight of the contrastive term next to cross-entropy.
    pub weight: f64,
    pub tau: f64,
    pub anchors: usize,
    pub positives: usize,
    pub negatives: usize,
    /// Draw anchors only from below-mean classes; otherwise from every class.
    pub balance: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            weight: 0.1,
            tau: 0.1,
            anchors: 50,
            positives: 512,
            negatives: 1024,
            balance: true,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "contrastive weight must be non-negative, got {}",
                self.weight
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Classes with IoU strictly below the mean. When nothing is below the mean
/// the lowest-index minimum is returned on its own. Values within rounding
/// noise of the mean count as equal to it.
pub fn poor_classes(raw_iou: &[f64]) -> Vec<usize> {
    if raw_iou.is_empty() {
        return Vec::new();
    }
    let mean = raw_iou.iter().sum::<f64>() / raw_iou.len() as f64;
    let tol = 1e-12 * mean.abs().max(1.0);
    let poor: Vec<usize> = (0..raw_iou.len()).filter(|&c| raw_iou[c] < mean - tol).collect();
    if !poor.is_empty() {
        return poor;
    }
    let mut best = 0;
    for (c, &v) in raw_iou.iter().enumerate() {
        if v < raw_iou[best] {
            best = c;
        }
    }
    vec![best]
}

/// Explicit anchors with their positive and negative sets. Vectors are
/// expected to be unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub anchors: Vec<Vec<f64>>,
    pub positives: Vec<Vec<Vec<f64>>>,
    pub negatives: Vec<Vec<Vec<f64>>>,
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveLoss {
    pub value: f64,
    pub anchors_used: usize,
}

impl ContrastiveLoss {
    /// True when every anchor lacked positives or negatives, so `value` is 0
    /// by convention rather than measured.
    pub fn all_skipped(&self) -> bool {
        self.anchors_used == 0
    }
}

impl ContrastiveBatch {
    pub fn validate(&self) -> Result<()> {
        if self.positives.len() != self.anchors.len() || self.negatives.len() != self.anchors.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} anchors, {} positive sets, {} negative sets",
                self.anchors.len(),
                self.positives.len(),
                self.negatives.len()
            )));
        }
        let all = self
            .anchors
            .iter()
            .chain(self.positives.iter().flatten())
            .chain(self.negatives.iter().flatten());
        for v in all {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidTensor(format!(
                    "contrastive vector has norm {norm}"
                )));
            }
        }
        Ok(())
    }
}

/// Mean per-anchor loss. Anchors with no positives or no negatives are
/// skipped.
pub fn contrastive_loss(batch: &ContrastiveBatch) -> Result<ContrastiveLoss> {
    batch.validate()?;
    let mut total = 0.0;
    let mut used = 0;
    for ((a, pos), neg) in batch.anchors.iter().zip(&batch.positives).zip(&batch.negatives) {
        let pos: Vec<&[f64]> = pos.iter().map(Vec::as_slice).collect();
        let neg: Vec<&[f64]> = neg.iter().map(Vec::as_slice).collect();
        if let Some(g) = anchor_loss_grad(a, &pos, &neg, batch.tau, false) {
            total += g.loss;
            used += 1;
        }
    }
    if used == 0 {
        log::warn!("contrastive loss: every anchor was skipped");
        return Ok(ContrastiveLoss {
            value: 0.0,
            anchors_used: 0,
        });
    }
    Ok(ContrastiveLoss {
        value: total / used as f64,
        anchors_used: used,
    })
}

/// Loss of one anchor and, when requested, its gradient. The gradient with
/// respect to positive `i` is `pos_coef[i] * anchor`, likewise for negatives.
#[derive(Debug, Clone)]
pub(crate) struct AnchorGrad {
    pub loss: f64,
    pub d_anchor: Vec<f64>,
    pub pos_coef: Vec<f64>,
    pub neg_coef: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub(crate) fn anchor_loss_grad(
    anchor: &[f64],
    pos: &[&[f64]],
    neg: &[&[f64]],
    tau: f64,
    want_grad: bool,
) -> Option<AnchorGrad> {
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let sp: Vec<f64> = pos.iter().map(|p| dot(anchor, p) / tau).collect();
    let sn: Vec<f64> = neg.iter().map(|n| dot(anchor, n) / tau).collect();
    let lse_n = log_sum_exp(&sn);
    let log_d: Vec<f64> = sp.iter().map(|&s| log_add_exp(s, lse_n)).collect();
    let inv_p = 1.0 / pos.len() as f64;
    let loss = inv_p * sp.iter().zip(&log_d).map(|(s, d)| d - s).sum::<f64>();
    if !want_grad {
        return Some(AnchorGrad {
            loss,
            d_anchor: Vec::new(),
            pos_coef: Vec::new(),
            neg_coef: Vec::new(),
        });
    }

    let dim = anchor.len();
    let mut d_anchor = vec![0.0; dim];
    let mut pos_coef = Vec::with_capacity(pos.len());
    for ((p, &s), &d) in pos.iter().zip(&sp).zip(&log_d) {
        let g = inv_p * ((s - d).exp() - 1.0) / tau;
        d_anchor.iter_mut().zip(p.iter()).for_each(|(da, x)| *da += g * x);
        pos_coef.push(g);
    }
    let weight: f64 = log_d.iter().map(|d| (lse_n - d).exp()).sum();
    let mut neg_coef = Vec::with_capacity(neg.len());
    for (n, &s) in neg.iter().zip(&sn) {
        let g = inv_p * (s - lse_n).exp() * weight / tau;
        d_anchor.iter_mut().zip(n.iter()).for_each(|(da, x)| *da += g * x);
        neg_coef.push(g);
    }
    Some(AnchorGrad {
        loss,
        d_anchor,
        pos_coef,
        neg_coef,
    })
}
