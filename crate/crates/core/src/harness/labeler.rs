use std::collections::HashMap;

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::harness::log::LogRecord;
use crate::raster::{LabelMask, UNLABELED};
use crate::units::LabelingUnit;

/// Answer for one queued unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelOutcome {
    /// Class codes for the unit's mask pixels, in mask order.
    Labeled(Vec<u8>),
    /// Annotator declined; the unit leaves the pool unlabeled.
    Skipped,
}

/// Source of labels for selected units.
pub trait Labeler {
    /// Returns one outcome per unit, in order. May block until all are known.
    fn label_batch(&mut self, iteration: usize, units: &[LabelingUnit]) -> Result<Vec<LabelOutcome>>;

    /// Called after each iteration's metrics are known.
    fn on_record(&mut self, _record: &LogRecord) {}

    /// Called once the budget is spent.
    fn on_finish(&mut self) {}
}

/// Ground-truth classes of the unit's pixels, in mask order.
pub fn oracle_label(unit: &LabelingUnit, truth: &LabelMask) -> Result<Vec<u8>> {
    let n = truth.num_pixels();
    unit.mask
        .iter()
        .map(|&p| {
            if p >= n {
                return Err(Error::UnitOutsideTruth {
                    unit: unit.id.clone(),
                    reason: format!("pixel {p} beyond {n} pixels"),
                });
            }
            match truth.label(p) {
                UNLABELED => Err(Error::UnitOutsideTruth {
                    unit: unit.id.clone(),
                    reason: format!("pixel {p} has no ground truth"),
                }),
                l => Ok(l),
            }
        })
        .collect()
}

/// Simulated annotator revealing ground truth.
pub struct OracleLabeler<'a> {
    truth: HashMap<&'a str, &'a LabelMask>,
}

impl<'a> OracleLabeler<'a> {
    pub fn new(samples: &'a [Sample]) -> Self {
        Self {
            truth: samples.iter().map(|s| (s.id.as_str(), &s.truth)).collect(),
        }
    }
}

impl Labeler for OracleLabeler<'_> {
    fn label_batch(&mut self, _iteration: usize, units: &[LabelingUnit]) -> Result<Vec<LabelOutcome>> {
        units
            .iter()
            .map(|u| {
                let truth = self.truth.get(u.image_id.as_str()).ok_or_else(|| Error::UnitOutsideTruth {
                    unit: u.id.clone(),
                    reason: format!("no ground truth for image {}", u.image_id),
                })?;
                oracle_label(u, truth).map(LabelOutcome::Labeled)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Provenance;
    use crate::units::UnitKind;

    #[test]
    fn copies_truth_in_mask_order() {
        let truth = LabelMask::from_labels(2, 2, vec![3, 1, 0, 2], Provenance::Human).unwrap();
        let unit = LabelingUnit {
            id: "a/r0".into(),
            image_id: "a".into(),
            kind: UnitKind::Rect,
            mask: vec![1, 3],
        };
        assert_eq!(oracle_label(&unit, &truth).unwrap(), vec![1, 2]);
        let outside = LabelingUnit {
            mask: vec![4],
            ..unit
        };
        assert!(matches!(oracle_label(&outside, &truth), Err(Error::UnitOutsideTruth { .. })));
    }
}
