//! Two-layer per-pixel network: `tanh` embedding followed by a softmax
//! classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::FeatureMap;
use crate::error::{Error, Result};
use crate::raster::ProbabilityMap;

pub const DEFAULT_EMBED_DIM: usize = 16;

/// Pixels per parallel work item; partial results are combined in chunk order.
pub(crate) const CHUNK: usize = 512;

/// Weights are row-major: `w_embed[j * d_emb + k]` maps feature `j` to
/// embedding unit `k`, `w_cls[k * C + c]` maps embedding `k` to class `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub d_feat: usize,
    pub d_emb: usize,
    pub num_classes: usize,
    pub w_embed: Vec<f64>,
    pub b_embed: Vec<f64>,
    pub w_cls: Vec<f64>,
    pub b_cls: Vec<f64>,
}

/// Gradients share the parameter layout.
pub type Gradients = ModelParams;

impl ModelParams {
    pub fn zeros(d_feat: usize, d_emb: usize, num_classes: usize) -> Self {
        Self {
            d_feat,
            d_emb,
            num_classes,
            w_embed: vec![0.0; d_feat * d_emb],
            b_embed: vec![0.0; d_emb],
            w_cls: vec![0.0; d_emb * num_classes],
            b_cls: vec![0.0; num_classes],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(d_feat: usize, d_emb: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(d_feat, d_emb, num_classes);
        let a = (6.0 / (d_feat + d_emb) as f64).sqrt();
        p.w_embed.iter_mut().for_each(|w| *w = rng.random_range(-a..a));
        let a = (6.0 / (d_emb + num_classes) as f64).sqrt();
        p.w_cls.iter_mut().for_each(|w| *w = rng.random_range(-a..a));
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.d_feat, self.d_emb, self.num_classes)
    }

    pub fn num_params(&self) -> usize {
        self.w_embed.len() + self.b_embed.len() + self.w_cls.len() + self.b_cls.len()
    }

    pub fn blocks(&self) -> [&[f64]; 4] {
        [&self.w_embed, &self.b_embed, &self.w_cls, &self.b_cls]
    }

    pub fn blocks_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [
            &mut self.w_embed,
            &mut self.b_embed,
            &mut self.w_cls,
            &mut self.b_cls,
        ]
    }

    /// All parameters in block order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for block in self.blocks_mut() {
            let n = block.len();
            block.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
    }

    pub fn check_features(&self, d_feat: usize) -> Result<()> {
        if d_feat != self.d_feat {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} features, got {d_feat}",
                self.d_feat
            )));
        }
        Ok(())
    }
}

/// Embedding (`tanh`) and class probabilities for one pixel.
pub(crate) fn forward_pixel(p: &ModelParams, f: &[f64], emb: &mut [f64], prob: &mut [f64]) {
    let (de, c) = (p.d_emb, p.num_classes);
    emb.copy_from_slice(&p.b_embed);
    for (j, &fj) in f.iter().enumerate() {
        if fj == 0.0 {
            continue;
        }
        let row = &p.w_embed[j * de..(j + 1) * de];
        emb.iter_mut().zip(row).for_each(|(e, w)| *e += fj * w);
    }
    emb.iter_mut().for_each(|e| *e = e.tanh());
    prob.copy_from_slice(&p.b_cls);
    for (k, &ek) in emb.iter().enumerate() {
        let row = &p.w_cls[k * c..(k + 1) * c];
        prob.iter_mut().zip(row).for_each(|(l, w)| *l += ek * w);
    }
    softmax_in_place(prob);
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

/// Runs the network on `n x d_feat` features; returns `(embeddings, probabilities)`
/// as `n x d_emb` and `n x C` row-major buffers.
pub fn forward(params: &ModelParams, features: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = params.d_feat;
    if d == 0 || !features.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch(format!(
            "{} feature values are not a multiple of {d}",
            features.len()
        )));
    }
    let n = features.len() / d;
    let (de, c) = (params.d_emb, params.num_classes);
    let mut emb = vec![0.0; n * de];
    let mut prob = vec![0.0; n * c];
    emb.par_chunks_mut(CHUNK * de)
        .zip(prob.par_chunks_mut(CHUNK * c))
        .zip(features.par_chunks(CHUNK * d))
        .for_each(|((e, p), f)| {
            for ((ei, pi), fi) in e.chunks_mut(de).zip(p.chunks_mut(c)).zip(f.chunks(d)) {
                forward_pixel(params, fi, ei, pi);
            }
        });
    Ok((emb, prob))
}

/// Per-pixel class probabilities for a whole feature map.
pub fn predict(params: &ModelParams, fm: &FeatureMap) -> Result<ProbabilityMap> {
    params.check_features(fm.dim)?;
    let (_, prob) = forward(params, &fm.data)?;
    ProbabilityMap::new(fm.height, fm.width, params.num_classes, prob)
}
