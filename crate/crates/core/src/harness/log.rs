use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::MetricReport;

/// Metrics after one training round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub budget_fraction: f64,
    pub labeled_pixels: u64,
    pub per_class_iou: Vec<f64>,
    pub miou: f64,
    pub min_iou: f64,
    pub mean_f1: f64,
    pub pseudo_pixel_counts: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

impl LogRecord {
    pub fn new(iteration: usize, budget_fraction: f64, labeled_pixels: u64, report: &MetricReport) -> Self {
        Self {
            iteration,
            budget_fraction,
            labeled_pixels,
            per_class_iou: report.per_class_iou.clone(),
            miou: report.miou,
            min_iou: report.min_iou(),
            mean_f1: report.mean_f1,
            pseudo_pixel_counts: Vec::new(),
            wall_time: None,
        }
    }
}

/// Ordered records, one per iteration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let rec = LogRecord {
            iteration: 2,
            budget_fraction: 0.1,
            labeled_pixels: 40,
            per_class_iou: vec![0.5, 0.25],
            miou: 0.375,
            min_iou: 0.25,
            mean_f1: 0.5,
            pseudo_pixel_counts: vec![3, 0],
            wall_time: None,
        };
        let log = RunLog {
            records: vec![rec.clone(), LogRecord { iteration: 3, ..rec }],
        };
        let text = log.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(!text.contains("wall_time"));
        assert_eq!(RunLog::from_jsonl(&text).unwrap(), log);
    }
}
