//! Pseudo-labels with class-specific adaptive ratio thresholds.
//!
//! For each class `c`, the unlabeled pixels predicted as `c` are ranked by
//! their top probability and the best `floor(K_c * n_c)` become pseudo-labels,
//! with `K_c = min(1, base * exp(mean_iou - iou_c))`. Classes the model does
//! worse on get a larger share.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::argmax;
use crate::raster::{LabelMask, ProbabilityMap, Provenance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoConfig {
    pub base: f64,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self { base: 0.5 }
    }
}

impl PseudoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0 && self.base <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "pseudo base must be in (0, 1], got {}",
                self.base
            )));
        }
        Ok(())
    }
}

/// Per-class ratio thresholds from raw (unnormalized) per-class IoU.
pub fn ratio_thresholds(raw_iou: &[f64], cfg: &PseudoConfig) -> Vec<f64> {
    if raw_iou.is_empty() {
        return Vec::new();
    }
    let mean = raw_iou.iter().sum::<f64>() / raw_iou.len() as f64;
    raw_iou
        .iter()
        .map(|&p| (cfg.base * (mean - p).exp()).min(1.0))
        .collect()
}

/// Candidate pixel: image, flat index, predicted class, top probability.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    image: usize,
    index: usize,
    class: usize,
    score: f64,
}

fn candidates(pms: &[&ProbabilityMap], labeled: &[&LabelMask]) -> Result<Vec<Candidate>> {
    if pms.len() != labeled.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} probability maps for {} label masks",
            pms.len(),
            labeled.len()
        )));
    }
    let mut out = Vec::new();
    for (image, (pm, lm)) in pms.iter().zip(labeled).enumerate() {
        if pm.height() != lm.height() || pm.width() != lm.width() {
            return Err(Error::DimensionMismatch(format!(
                "probability map {}x{} vs labels {}x{}",
                pm.height(),
                pm.width(),
                lm.height(),
                lm.width()
            )));
        }
        out.extend(
            (0..pm.num_pixels())
                .filter(|&i| lm.provenance_at(i) != Provenance::Human)
                .map(|i| {
                    let dist = pm.pixel(i);
                    let class = argmax(dist);
                    Candidate {
                        image,
                        index: i,
                        class,
                        score: dist[class],
                    }
                }),
        );
    }
    Ok(out)
}

/// Best first; equal scores keep image then row-major order.
fn rank(c: &mut [Candidate]) {
    c.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.image.cmp(&b.image))
            .then(a.index.cmp(&b.index))
    });
}

fn check_ratios(ratios: &[f64], num_classes: usize) -> Result<()> {
    if ratios.len() != num_classes {
        return Err(Error::DimensionMismatch(format!(
            "{} ratios for {num_classes} classes",
            ratios.len()
        )));
    }
    Ok(())
}

/// Rebuilds the pseudo-labels of one image.
///
/// Human labels are kept as they are; every other pixel is either selected
/// as a pseudo-label or left unlabeled.
pub fn generate_pseudo(pm: &ProbabilityMap, labeled: &LabelMask, ratios: &[f64]) -> Result<LabelMask> {
    Ok(generate_pseudo_pool(&[pm], &[labeled], ratios)?.remove(0))
}

/// [`generate_pseudo`] over a pool of images, ranking each class across the
/// whole pool.
pub fn generate_pseudo_pool(
    pms: &[&ProbabilityMap],
    labeled: &[&LabelMask],
    ratios: &[f64],
) -> Result<Vec<LabelMask>> {
    let num_classes = pms.first().map_or(ratios.len(), |p| p.num_classes());
    check_ratios(ratios, num_classes)?;
    let mut by_class: Vec<Vec<Candidate>> = vec![Vec::new(); num_classes];
    for c in candidates(pms, labeled)? {
        by_class[c.class].push(c);
    }
    let mut out: Vec<LabelMask> = labeled.iter().map(|lm| human_only(lm)).collect();
    for (class, mut list) in by_class.into_iter().enumerate() {
        let k = (ratios[class].clamp(0.0, 1.0) * list.len() as f64).floor() as usize;
        rank(&mut list);
        for c in &list[..k] {
            out[c.image].set(c.index, class as u8, Provenance::Pseudo);
        }
    }
    Ok(out)
}

/// Class-agnostic baseline: the `total` most confident unlabeled pixels
/// overall, whatever their class.
pub fn generate_pseudo_global(
    pms: &[&ProbabilityMap],
    labeled: &[&LabelMask],
    total: usize,
) -> Result<Vec<LabelMask>> {
    let mut list = candidates(pms, labeled)?;
    rank(&mut list);
    let mut out: Vec<LabelMask> = labeled.iter().map(|lm| human_only(lm)).collect();
    for c in list.iter().take(total) {
        out[c.image].set(c.index, c.class as u8, Provenance::Pseudo);
    }
    Ok(out)
}

/// Number of pixels the class-specific rule selects: `sum_c floor(K_c * n_c)`.
pub fn pseudo_quota(pms: &[&ProbabilityMap], labeled: &[&LabelMask], ratios: &[f64]) -> Result<usize> {
    let num_classes = pms.first().map_or(ratios.len(), |p| p.num_classes());
    check_ratios(ratios, num_classes)?;
    let mut counts = vec![0usize; num_classes];
    for c in candidates(pms, labeled)? {
        counts[c.class] += 1;
    }
    Ok(counts
        .iter()
        .zip(ratios)
        .map(|(&n, &k)| (k.clamp(0.0, 1.0) * n as f64).floor() as usize)
        .sum())
}

fn human_only(labeled: &LabelMask) -> LabelMask {
    let mut out = labeled.clone();
    out.clear_provenance(Provenance::Pseudo);
    out
}

/// Pseudo-labeled pixel count per class.
pub fn pseudo_counts(mask: &LabelMask, num_classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; num_classes];
    for (&l, &p) in mask.labels().iter().zip(mask.provenance()) {
        if p == Provenance::Pseudo {
            counts[usize::from(l)] += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_performance_gives_base() {
        let k = ratio_thresholds(&[0.4, 0.4, 0.4], &PseudoConfig::default());
        assert!(k.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn two_class_thresholds() {
        let k = ratio_thresholds(&[0.8, 0.4], &PseudoConfig::default());
        assert!((k[0] - 0.5 * (-0.2f64).exp()).abs() < 1e-12);
        assert!((k[1] - 0.5 * 0.2f64.exp()).abs() < 1e-12);
        assert!((k[0] - 0.40937).abs() < 1e-5);
        assert!((k[1] - 0.61070).abs() < 1e-5);
    }

    #[test]
    fn threshold_clamps_at_one() {
        // mean 0.8, so class 0 has exponent 0.8
        let k = ratio_thresholds(&[0.0, 1.0, 1.0, 1.0, 1.0], &PseudoConfig::default());
        assert!(0.5 * 0.8f64.exp() > 1.0);
        assert_eq!(k[0], 1.0);
    }

    fn two_class_map(scores: &[f64]) -> ProbabilityMap {
        let data = scores.iter().flat_map(|&s| [s, 1.0 - s]).collect();
        ProbabilityMap::new(1, scores.len(), 2, data).unwrap()
    }

    #[test]
    fn full_and_empty_ratios() {
        let pm = two_class_map(&[0.9, 0.2, 0.6]);
        let lm = LabelMask::unlabeled(1, 3);
        let all = generate_pseudo(&pm, &lm, &[1.0, 1.0]).unwrap();
        assert_eq!(all.labels(), &[0, 1, 0]);
        assert!(all.provenance().iter().all(|&p| p == Provenance::Pseudo));
        let none = generate_pseudo(&pm, &lm, &[0.0, 0.0]).unwrap();
        assert_eq!(none.count_with(Provenance::Pseudo), 0);
    }

    #[test]
    fn top_half_of_ten() {
        let scores: Vec<f64> = [0.55, 0.91, 0.62, 0.99, 0.7, 0.81, 0.6, 0.95, 0.51, 0.77].to_vec();
        let pm = two_class_map(&scores);
        let out = generate_pseudo(&pm, &LabelMask::unlabeled(1, 10), &[0.5, 0.5]).unwrap();
        let picked: Vec<usize> = (0..10).filter(|&i| out.is_decided(i)).collect();
        assert_eq!(picked, vec![1, 3, 5, 7, 9]);
    }

    #[test]
    fn human_labels_survive() {
        let pm = two_class_map(&[0.9, 0.9]);
        let mut lm = LabelMask::unlabeled(1, 2);
        lm.set(0, 1, Provenance::Human);
        let out = generate_pseudo(&pm, &lm, &[1.0, 1.0]).unwrap();
        assert_eq!(out.label(0), 1);
        assert_eq!(out.provenance_at(0), Provenance::Human);
        assert_eq!(out.provenance_at(1), Provenance::Pseudo);
    }

    #[test]
    fn stale_pseudo_labels_are_replaced() {
        let pm = two_class_map(&[0.9, 0.2]);
        let mut lm = LabelMask::unlabeled(1, 2);
        lm.set(1, 0, Provenance::Pseudo);
        let out = generate_pseudo(&pm, &lm, &[0.0, 0.0]).unwrap();
        assert!(!out.is_decided(1));
    }

    #[test]
    fn global_selection_ignores_class() {
        let pm = two_class_map(&[0.9, 0.95, 0.3, 0.4]);
        let lm = LabelMask::unlabeled(1, 4);
        let out = generate_pseudo_global(&[&pm], &[&lm], 2).unwrap();
        assert_eq!(pseudo_counts(&out[0], 2), vec![2, 0]);
        assert_eq!(pseudo_quota(&[&pm], &[&lm], &[0.5, 0.5]).unwrap(), 2);
    }
}
