//! Information and evaluation formulas over rasters: pixel entropy, argmax
//! decoding, class proportions, and confusion-matrix metrics (IoU / F1).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{LabelMask, ProbabilityMap, Provenance, UNLABELED};

/// Shannon entropy (natural log) of one distribution, with `0 ln 0 = 0`.
pub fn entropy(dist: &[f64]) -> f64 {
    -dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

fn check_indices(mask: &[usize], len: usize) -> Result<()> {
    match mask.iter().find(|&&i| i >= len) {
        Some(&index) => Err(Error::OutOfBounds { index, len }),
        None => Ok(()),
    }
}

/// Total entropy of the masked pixels. An empty mask scores 0.
pub fn entropy_sum(pm: &ProbabilityMap, mask: &[usize]) -> Result<f64> {
    check_indices(mask, pm.num_pixels())?;
    Ok(mask.iter().map(|&i| entropy(pm.pixel(i))).sum())
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(dist: &[f64]) -> usize {
    let mut best = 0;
    for (c, &p) in dist.iter().enumerate().skip(1) {
        if p > dist[best] {
            best = c;
        }
    }
    best
}

/// Per-pixel predicted classes. Provenance stays `None`: these are
/// predictions, not labels.
pub fn argmax_map(pm: &ProbabilityMap) -> LabelMask {
    let labels = (0..pm.num_pixels())
        .map(|i| argmax(pm.pixel(i)) as u8)
        .collect();
    LabelMask::from_parts(
        pm.height(),
        pm.width(),
        labels,
        vec![Provenance::None; pm.num_pixels()],
    )
    .expect("dimensions come from a valid probability map")
}

/// Fraction of the decided masked pixels belonging to each class.
pub fn class_proportions(lm: &LabelMask, mask: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    check_indices(mask, lm.num_pixels())?;
    let mut counts = vec![0usize; num_classes];
    let mut decided = 0usize;
    for &i in mask {
        let l = lm.label(i);
        if l == UNLABELED {
            continue;
        }
        let l = usize::from(l);
        if l >= num_classes {
            return Err(Error::InvalidTensor(format!(
                "class {l} out of range for {num_classes} classes"
            )));
        }
        counts[l] += 1;
        decided += 1;
    }
    if decided == 0 {
        return Err(Error::NoDecidedPixels);
    }
    Ok(counts
        .into_iter()
        .map(|n| n as f64 / decided as f64)
        .collect())
}

/// Accumulates `truth x predicted` pixel counts across any number of masks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    /// Row-major; `counts[t * C + p]` counts truth class `t` predicted as `p`.
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    /// Adds every pixel decided in `truth`. Undecided truth pixels are skipped;
    /// an undecided prediction on a decided truth pixel is an error.
    pub fn add(&mut self, pred: &LabelMask, truth: &LabelMask) -> Result<()> {
        self.add_where(pred, truth, |_| true)
    }

    /// Like [`add`](Self::add) but only for pixels accepted by `keep`.
    pub fn add_where(
        &mut self,
        pred: &LabelMask,
        truth: &LabelMask,
        keep: impl Fn(usize) -> bool,
    ) -> Result<()> {
        if pred.height() != truth.height() || pred.width() != truth.width() {
            return Err(Error::DimensionMismatch(format!(
                "prediction {}x{} vs truth {}x{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            )));
        }
        let c = self.num_classes;
        for (i, (&p, &t)) in pred.labels().iter().zip(truth.labels()).enumerate() {
            if t == UNLABELED || !keep(i) {
                continue;
            }
            let (t, p) = (usize::from(t), usize::from(p));
            if t >= c || p >= c {
                return Err(Error::InvalidTensor(format!(
                    "pixel {i}: truth {t} / prediction {p} out of range for {c} classes"
                )));
            }
            self.counts[t * c + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn report(&self) -> MetricReport {
        let c = self.num_classes;
        let mut per_class_iou = vec![0.0; c];
        let mut per_class_f1 = vec![0.0; c];
        let mut present = vec![false; c];
        for k in 0..c {
            let tp = self.get(k, k);
            let truth_total: u64 = (0..c).map(|j| self.get(k, j)).sum();
            let pred_total: u64 = (0..c).map(|i| self.get(i, k)).sum();
            let (fn_, fp) = (truth_total - tp, pred_total - tp);
            present[k] = truth_total > 0;
            let union = tp + fp + fn_;
            if union > 0 {
                per_class_iou[k] = tp as f64 / union as f64;
            }
            per_class_f1[k] = f_beta(tp, fp, fn_, 1.0);
        }
        let mean_over_present = |v: &[f64]| {
            let n = present.iter().filter(|&&p| p).count();
            if n == 0 {
                0.0
            } else {
                v.iter()
                    .zip(&present)
                    .filter(|(_, &p)| p)
                    .map(|(x, _)| x)
                    .sum::<f64>()
                    / n as f64
            }
        };
        MetricReport {
            miou: mean_over_present(&per_class_iou),
            mean_f1: mean_over_present(&per_class_f1),
            per_class_iou,
            per_class_f1,
            present,
            confusion: (0..c)
                .map(|t| (0..c).map(|p| self.get(t, p)).collect())
                .collect(),
            beta: 1.0,
        }
    }
}

/// `(1 + b^2) * precision * recall / (b^2 * precision + recall)`; zero when
/// there are no true positives.
fn f_beta(tp: u64, fp: u64, fn_: u64, beta: f64) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    let b2 = beta * beta;
    (1.0 + b2) * precision * recall / (b2 * precision + recall)
}

/// Per-class and mean segmentation quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class_iou: Vec<f64>,
    pub miou: f64,
    pub per_class_f1: Vec<f64>,
    pub mean_f1: f64,
    /// Whether each class occurs in the truth; absent classes are left out of the means.
    pub present: Vec<bool>,
    /// `confusion[truth][pred]` pixel counts.
    pub confusion: Vec<Vec<u64>>,
    pub beta: f64,
}

impl MetricReport {
    /// Smallest IoU among classes present in the truth.
    pub fn min_iou(&self) -> f64 {
        self.per_class_iou
            .iter()
            .zip(&self.present)
            .filter(|(_, &p)| p)
            .map(|(&v, _)| v)
            .fold(f64::INFINITY, f64::min)
            .min(1.0)
    }
}

/// Compares a prediction against truth; undecided truth pixels are ignored.
pub fn evaluate(pred: &LabelMask, truth: &LabelMask, num_classes: usize) -> Result<MetricReport> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(pred, truth)?;
    Ok(cm.report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Provenance;

    fn mask(h: usize, w: usize, labels: &[u8]) -> LabelMask {
        LabelMask::from_labels(h, w, labels.to_vec(), Provenance::Human).unwrap()
    }

    #[test]
    fn entropy_of_uniform_binary_block() {
        let pm = ProbabilityMap::uniform(2, 2, 2).unwrap();
        let u = entropy_sum(&pm, &[0, 1, 2, 3]).unwrap();
        assert!((u - 4.0 * 2f64.ln()).abs() < 1e-12);
        assert!((u - 2.772589).abs() < 1e-6);
    }

    #[test]
    fn entropy_of_one_hot_is_zero() {
        let pm = ProbabilityMap::new(1, 2, 3, vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(entropy_sum(&pm, &[0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn entropy_of_skewed_pixel() {
        let pm = ProbabilityMap::new(1, 1, 2, vec![0.7, 0.3]).unwrap();
        let expected = -(0.7f64 * 0.7f64.ln() + 0.3f64 * 0.3f64.ln());
        let u = entropy_sum(&pm, &[0]).unwrap();
        assert!((u - expected).abs() < 1e-15);
        assert!((u - 0.610864).abs() < 1e-6);
    }

    #[test]
    fn entropy_edge_cases() {
        let pm = ProbabilityMap::uniform(2, 2, 2).unwrap();
        assert_eq!(entropy_sum(&pm, &[]).unwrap(), 0.0);
        assert!(matches!(
            entropy_sum(&pm, &[4]),
            Err(Error::OutOfBounds { index: 4, len: 4 })
        ));
    }

    #[test]
    fn argmax_ties_break_low() {
        let pm = ProbabilityMap::new(1, 2, 2, vec![0.5, 0.5, 0.2, 0.8]).unwrap();
        assert_eq!(argmax_map(&pm).labels(), &[0, 1]);
    }

    #[test]
    fn argmax_of_one_hot() {
        let mut data = vec![0.0; 4 * 3];
        for px in data.chunks_exact_mut(3) {
            px[2] = 1.0;
        }
        let pm = ProbabilityMap::new(2, 2, 3, data).unwrap();
        assert!(argmax_map(&pm).labels().iter().all(|&l| l == 2));
    }

    #[test]
    fn proportions_count_decided_pixels() {
        let lm = mask(2, 2, &[0, 0, 1, 2]);
        assert_eq!(
            class_proportions(&lm, &[0, 1, 2, 3], 3).unwrap(),
            vec![0.5, 0.25, 0.25]
        );
        let ones = mask(2, 2, &[1, 1, 1, 1]);
        assert_eq!(
            class_proportions(&ones, &[0, 1, 2, 3], 3).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
        let partial = mask(2, 2, &[0, UNLABELED, 1, UNLABELED]);
        assert_eq!(
            class_proportions(&partial, &[0, 1, 2, 3], 2).unwrap(),
            vec![0.5, 0.5]
        );
        let none = LabelMask::unlabeled(2, 2);
        assert!(matches!(
            class_proportions(&none, &[0, 1], 2),
            Err(Error::NoDecidedPixels)
        ));
        assert!(matches!(class_proportions(&none, &[], 2), Err(Error::EmptyMask)));
    }

    #[test]
    fn evaluate_identity_and_disjoint() {
        let t = mask(2, 2, &[0, 1, 2, 1]);
        let r = evaluate(&t, &t, 3).unwrap();
        assert_eq!(r.per_class_iou, vec![1.0; 3]);
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.mean_f1, 1.0);

        let t = mask(1, 2, &[0, 0]);
        let p = mask(1, 2, &[1, 1]);
        let r = evaluate(&p, &t, 2).unwrap();
        assert_eq!(r.miou, 0.0);
        assert_eq!(r.present, vec![true, false]);
    }

    #[test]
    fn evaluate_hand_confusion() {
        // truth [[0,1],[0,1]], prediction [[0,0],[1,1]]
        let t = mask(2, 2, &[0, 1, 0, 1]);
        let p = mask(2, 2, &[0, 0, 1, 1]);
        let r = evaluate(&p, &t, 2).unwrap();
        assert_eq!(r.confusion, vec![vec![1, 1], vec![1, 1]]);
        assert!((r.per_class_iou[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.per_class_iou[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.miou - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.mean_f1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn evaluate_rejects_mismatch() {
        let a = mask(1, 2, &[0, 0]);
        let b = mask(2, 1, &[0, 0]);
        assert!(matches!(evaluate(&a, &b, 2), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn evaluate_skips_unlabeled_truth() {
        let t = mask(1, 3, &[0, UNLABELED, 1]);
        let p = mask(1, 3, &[0, 1, 1]);
        let r = evaluate(&p, &t, 2).unwrap();
        assert_eq!(r.miou, 1.0);
    }
}
