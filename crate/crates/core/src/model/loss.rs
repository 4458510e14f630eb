//! Cross-entropy over decided pixels plus the weighted contrastive term, with
//! analytic gradients.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use super::contrastive::{anchor_loss_grad, poor_classes, ContrastiveConfig};
use super::features::FeatureMap;
use super::network::{forward_pixel, Gradients, ModelParams, CHUNK};
use crate::error::{Error, Result};
use crate::raster::{LabelMask, Provenance};

/// Labeled pixels gathered for training: one feature row, class and
/// provenance per pixel.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PixelSet {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<u8>,
    pub human: Vec<bool>,
}

impl PixelSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, feature: &[f64], label: u8, human: bool) {
        self.features.extend_from_slice(feature);
        self.labels.push(label);
        self.human.push(human);
    }

    /// Adds every decided pixel of `labels`.
    pub fn extend_from(&mut self, fm: &FeatureMap, labels: &LabelMask) -> Result<()> {
        if fm.dim != self.dim || fm.height != labels.height() || fm.width != labels.width() {
            return Err(Error::DimensionMismatch(format!(
                "features {}x{}x{} vs labels {}x{} (expected dim {})",
                fm.height,
                fm.width,
                fm.dim,
                labels.height(),
                labels.width(),
                self.dim
            )));
        }
        for i in 0..fm.num_pixels() {
            match labels.provenance_at(i) {
                Provenance::None => {}
                p => self.push(fm.pixel(i), labels.label(i), p == Provenance::Human),
            }
        }
        Ok(())
    }

    pub fn from_map(fm: &FeatureMap, labels: &LabelMask) -> Result<Self> {
        let mut set = Self::new(fm.dim);
        set.extend_from(fm, labels)?;
        Ok(set)
    }

    /// Pixels at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut out = Self::new(self.dim);
        for &i in indices {
            out.push(&self.features[i * self.dim..(i + 1) * self.dim], self.labels[i], self.human[i]);
        }
        out
    }
}

/// Contrastive pairs as indices into a [`PixelSet`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContrastivePlan {
    pub anchors: Vec<usize>,
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

/// Samples anchors, positives and negatives among HUMAN pixels. The draw
/// depends only on labels and the rng, never on model parameters.
///
/// With `balance` and known per-class IoU, anchors come from the below-mean
/// classes; otherwise from every class.
pub fn plan_contrastive<R: Rng>(
    set: &PixelSet,
    raw_iou: Option<&[f64]>,
    cfg: &ContrastiveConfig,
    rng: &mut R,
) -> ContrastivePlan {
    let num_classes = set.labels.iter().map(|&l| usize::from(l) + 1).max().unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, (&l, &h)) in set.labels.iter().zip(&set.human).enumerate() {
        if h {
            by_class[usize::from(l)].push(i);
        }
    }
    let anchor_classes: Vec<usize> = match raw_iou {
        Some(iou) if cfg.balance => poor_classes(iou),
        _ => (0..num_classes).collect(),
    };
    let pool: Vec<usize> = {
        let mut v: Vec<usize> = anchor_classes
            .iter()
            .filter_map(|&c| by_class.get(c))
            .flatten()
            .copied()
            .collect();
        v.sort_unstable();
        v
    };
    let mut plan = ContrastivePlan::default();
    if pool.is_empty() || cfg.anchors == 0 {
        return plan;
    }
    let take = cfg.anchors.min(pool.len());
    for k in sample(rng, pool.len(), take).into_vec() {
        let a = pool[k];
        let class = usize::from(set.labels[a]);
        let same: Vec<usize> = by_class[class].iter().copied().filter(|&i| i != a).collect();
        let other: Vec<usize> = by_class
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != class)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        plan.anchors.push(a);
        plan.positives.push(pick(&same, cfg.positives, rng));
        plan.negatives.push(pick(&other, cfg.negatives, rng));
    }
    plan
}

fn pick<R: Rng>(from: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    if from.len() <= n {
        return from.to_vec();
    }
    sample(rng, from.len(), n).into_iter().map(|k| from[k]).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cross_entropy: f64,
    pub contrastive: f64,
    pub anchors_used: usize,
}

/// Loss and gradient of `mean CE + weight * contrastive` over `set`.
///
/// The contrastive term is evaluated on ℓ2-normalized embeddings; gradients
/// flow back through the normalization and the `tanh`. Partial sums are
/// formed over fixed pixel chunks and combined in chunk order, so the result
/// does not depend on the thread count.
pub fn loss_and_grad(
    params: &ModelParams,
    set: &PixelSet,
    plan: &ContrastivePlan,
    cfg: &ContrastiveConfig,
) -> Result<(LossBreakdown, Gradients)> {
    if set.is_empty() {
        return Err(Error::NoDecidedPixels);
    }
    params.check_features(set.dim)?;
    if let Some(&l) = set.labels.iter().find(|&&l| usize::from(l) >= params.num_classes) {
        return Err(Error::InvalidTensor(format!(
            "label {l} outside {} classes",
            params.num_classes
        )));
    }
    let (d, de, c) = (set.dim, params.d_emb, params.num_classes);
    let n = set.len();

    let mut emb = vec![0.0; n * de];
    let mut prob = vec![0.0; n * c];
    emb.par_chunks_mut(CHUNK * de)
        .zip(prob.par_chunks_mut(CHUNK * c))
        .zip(set.features.par_chunks(CHUNK * d))
        .for_each(|((e, p), f)| {
            for ((ei, pi), fi) in e.chunks_mut(de).zip(p.chunks_mut(c)).zip(f.chunks(d)) {
                forward_pixel(params, fi, ei, pi);
            }
        });

    // Contrastive term: gradient with respect to the raw embeddings.
    let mut d_emb = vec![0.0; n * de];
    let mut contrastive = 0.0;
    let mut anchors_used = 0;
    if cfg.weight > 0.0 && !plan.anchors.is_empty() {
        let z = normalize_rows(&emb, de);
        let row = |i: usize| &z[i * de..(i + 1) * de];
        let mut d_z = vec![0.0; n * de];
        let mut grads = Vec::new();
        for ((&a, pos), neg) in plan.anchors.iter().zip(&plan.positives).zip(&plan.negatives) {
            let p: Vec<&[f64]> = pos.iter().map(|&i| row(i)).collect();
            let q: Vec<&[f64]> = neg.iter().map(|&i| row(i)).collect();
            if let Some(g) = anchor_loss_grad(row(a), &p, &q, cfg.tau, true) {
                contrastive += g.loss;
                anchors_used += 1;
                grads.push((a, pos, neg, g));
            }
        }
        if anchors_used > 0 {
            contrastive /= anchors_used as f64;
            let scale = cfg.weight / anchors_used as f64;
            let mut add = |i: usize, coef: f64, g: &[f64]| {
                d_z[i * de..(i + 1) * de]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(acc, v)| *acc += coef * v);
            };
            for (a, pos, neg, g) in &grads {
                add(*a, scale, &g.d_anchor);
                let za = z[*a * de..(*a + 1) * de].to_vec();
                for (&i, &cp) in pos.iter().zip(&g.pos_coef) {
                    add(i, scale * cp, &za);
                }
                for (&i, &cn) in neg.iter().zip(&g.neg_coef) {
                    add(i, scale * cn, &za);
                }
            }
            for i in 0..n {
                let dz = &d_z[i * de..(i + 1) * de];
                if dz.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let e = &emb[i * de..(i + 1) * de];
                let zi = row(i);
                let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
                let proj: f64 = zi.iter().zip(dz).map(|(a, b)| a * b).sum();
                for k in 0..de {
                    d_emb[i * de + k] = (dz[k] - zi[k] * proj) / norm;
                }
            }
        }
    }

    let inv_n = 1.0 / n as f64;
    let partials: Vec<(f64, Gradients)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut g = params.zeros_like();
            let mut ce = 0.0;
            let mut dlogit = vec![0.0; c];
            let mut dpre = vec![0.0; de];
            for i in chunk * CHUNK..((chunk + 1) * CHUNK).min(n) {
                let y = usize::from(set.labels[i]);
                let p = &prob[i * c..(i + 1) * c];
                let e = &emb[i * de..(i + 1) * de];
                let f = &set.features[i * d..(i + 1) * d];
                ce -= p[y].max(f64::MIN_POSITIVE).ln();
                for k in 0..c {
                    dlogit[k] = inv_n * (p[k] - if k == y { 1.0 } else { 0.0 });
                    g.b_cls[k] += dlogit[k];
                }
                for (k, &ek) in e.iter().enumerate() {
                    let w = &params.w_cls[k * c..(k + 1) * c];
                    let gw = &mut g.w_cls[k * c..(k + 1) * c];
                    let mut back = d_emb[i * de + k];
                    for m in 0..c {
                        gw[m] += ek * dlogit[m];
                        back += w[m] * dlogit[m];
                    }
                    dpre[k] = back * (1.0 - ek * ek);
                    g.b_embed[k] += dpre[k];
                }
                for (j, &fj) in f.iter().enumerate() {
                    if fj == 0.0 {
                        continue;
                    }
                    g.w_embed[j * de..(j + 1) * de]
                        .iter_mut()
                        .zip(&dpre)
                        .for_each(|(acc, v)| *acc += fj * v);
                }
            }
            (ce, g)
        })
        .collect();

    let mut grad = params.zeros_like();
    let mut ce = 0.0;
    for (part_ce, g) in &partials {
        ce += part_ce;
        grad.add_scaled(g, 1.0);
    }
    ce *= inv_n;
    let total = ce + cfg.weight * contrastive;
    Ok((
        LossBreakdown {
            total,
            cross_entropy: ce,
            contrastive,
            anchors_used,
        },
        grad,
    ))
}

/// Loss only; same value as [`loss_and_grad`].
pub fn loss_value(
    params: &ModelParams,
    set: &PixelSet,
    plan: &ContrastivePlan,
    cfg: &ContrastiveConfig,
) -> Result<f64> {
    Ok(loss_and_grad(params, set, plan, cfg)?.0.total)
}

const NORM_FLOOR: f64 = 1e-12;

fn normalize_rows(v: &[f64], dim: usize) -> Vec<f64> {
    let mut out = v.to_vec();
    for row in out.chunks_mut(dim) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
        row.iter_mut().for_each(|x| *x /= norm);
    }
    out
}
