//! Write-ahead journal of labeling decisions.
//!
//! Each record is a little-endian `u32` byte length followed by that many
//! bytes of JSON. Everything else in a run is a deterministic function of the
//! config, the seed and these decisions, so replaying the journal through the
//! same loop rebuilds the run exactly. A torn record at the end of the file
//! (from a crash mid-write) is dropped on open.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, PoisonError};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::labeler::{LabelOutcome, Labeler};
use crate::harness::log::LogRecord;
use crate::rle::{decode_labels, encode_labels, LabelRun};
use crate::units::LabelingUnit;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JournalRecord {
    Label {
        iteration: usize,
        unit_id: String,
        labels: Vec<LabelRun>,
    },
    Skip {
        iteration: usize,
        unit_id: String,
    },
}

impl JournalRecord {
    pub fn unit_id(&self) -> &str {
        match self {
            Self::Label { unit_id, .. } | Self::Skip { unit_id, .. } => unit_id,
        }
    }

    pub fn outcome(&self) -> LabelOutcome {
        match self {
            Self::Label { labels, .. } => LabelOutcome::Labeled(decode_labels(labels)),
            Self::Skip { .. } => LabelOutcome::Skipped,
        }
    }

    pub fn new(iteration: usize, unit_id: &str, outcome: &LabelOutcome) -> Self {
        match outcome {
            LabelOutcome::Labeled(l) => Self::Label {
                iteration,
                unit_id: unit_id.to_string(),
                labels: encode_labels(l),
            },
            LabelOutcome::Skipped => Self::Skip {
                iteration,
                unit_id: unit_id.to_string(),
            },
        }
    }
}

/// Decodes complete records; returns them with the byte length they span.
pub fn decode_records(bytes: &[u8]) -> (Vec<JournalRecord>, usize) {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos + 4 <= bytes.len() {
        let len = u32::from_le_bytes([bytes[pos], bytes[pos + 1], bytes[pos + 2], bytes[pos + 3]]) as usize;
        let end = pos + 4 + len;
        if end > bytes.len() {
            break;
        }
        match serde_json::from_slice(&bytes[pos + 4..end]) {
            Ok(r) => out.push(r),
            Err(_) => break,
        }
        pos = end;
    }
    (out, pos)
}

pub fn encode_record(record: &JournalRecord) -> Result<Vec<u8>> {
    let body = serde_json::to_vec(record)?;
    let len = u32::try_from(body.len()).map_err(|_| Error::Journal("record too large".into()))?;
    let mut out = len.to_le_bytes().to_vec();
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn read_journal(path: impl AsRef<Path>) -> Result<Vec<JournalRecord>> {
    Ok(decode_records(&std::fs::read(path)?).0)
}

#[derive(Debug, Default)]
struct Inner {
    file: Option<File>,
    records: Vec<JournalRecord>,
    by_unit: HashMap<String, usize>,
}

/// Shared handle to a journal. Clones refer to the same journal.
#[derive(Debug, Clone, Default)]
pub struct Journal {
    inner: Arc<Mutex<Inner>>,
}

impl Journal {
    /// Journal that is not persisted.
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens or creates a journal file, keeping its complete records and
    /// cutting off a torn tail.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let (records, good) = decode_records(&bytes);
        if good < bytes.len() {
            log::warn!(
                "journal {}: dropping {} bytes of incomplete record",
                path.display(),
                bytes.len() - good
            );
            file.set_len(good as u64)?;
        }
        let by_unit = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.unit_id().to_string(), i))
            .collect();
        Ok(Self {
            inner: Arc::new(Mutex::new(Inner {
                file: Some(file),
                records,
                by_unit,
            })),
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(PoisonError::into_inner)
    }

    /// Appends a decision unless the unit already has one. Returns whether
    /// the record was written.
    pub fn append(&self, record: JournalRecord) -> Result<bool> {
        let mut inner = self.lock();
        if inner.by_unit.contains_key(record.unit_id()) {
            return Ok(false);
        }
        if let Some(f) = inner.file.as_mut() {
            f.write_all(&encode_record(&record)?)?;
            f.flush()?;
        }
        let idx = inner.records.len();
        inner.by_unit.insert(record.unit_id().to_string(), idx);
        inner.records.push(record);
        Ok(true)
    }

    pub fn get(&self, unit_id: &str) -> Option<JournalRecord> {
        let inner = self.lock();
        inner.by_unit.get(unit_id).map(|&i| inner.records[i].clone())
    }

    pub fn records(&self) -> Vec<JournalRecord> {
        self.lock().records.clone()
    }

    pub fn len(&self) -> usize {
        self.lock().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Answers from the journal where it has them, asks `inner` for the rest and
/// journals the new answers.
pub struct JournaledLabeler<L> {
    pub inner: L,
    pub journal: Journal,
}

impl<L: Labeler> Labeler for JournaledLabeler<L> {
    fn label_batch(&mut self, iteration: usize, units: &[LabelingUnit]) -> Result<Vec<LabelOutcome>> {
        let mut out: Vec<Option<LabelOutcome>> = units
            .iter()
            .map(|u| self.journal.get(&u.id).map(|r| r.outcome()))
            .collect();
        let missing: Vec<usize> = (0..units.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let ask: Vec<LabelingUnit> = missing.iter().map(|&i| units[i].clone()).collect();
            let answers = self.inner.label_batch(iteration, &ask)?;
            if answers.len() != ask.len() {
                return Err(Error::Labeler(format!(
                    "{} answers for {} units",
                    answers.len(),
                    ask.len()
                )));
            }
            for (&i, a) in missing.iter().zip(answers) {
                self.journal.append(JournalRecord::new(iteration, &units[i].id, &a))?;
                // A concurrent writer may have recorded the unit first.
                out[i] = self.journal.get(&units[i].id).map(|r| r.outcome());
            }
        }
        let out: Vec<LabelOutcome> = out.into_iter().map(|o| o.unwrap_or(LabelOutcome::Skipped)).collect();
        for (u, o) in units.iter().zip(&out) {
            if let LabelOutcome::Labeled(l) = o {
                if l.len() as u64 != u.cost() {
                    return Err(Error::Journal(format!(
                        "unit {} has {} journaled labels for {} pixels",
                        u.id,
                        l.len(),
                        u.cost()
                    )));
                }
            }
        }
        Ok(out)
    }

    fn on_record(&mut self, record: &LogRecord) {
        self.inner.on_record(record);
    }

    fn on_finish(&mut self) {
        self.inner.on_finish();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str) -> JournalRecord {
        JournalRecord::new(1, id, &LabelOutcome::Labeled(vec![0, 0, 2]))
    }

    #[test]
    fn record_framing() {
        let bytes = encode_record(&rec("a")).unwrap();
        let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        assert_eq!(len, bytes.len() - 4);
        let body: serde_json::Value = serde_json::from_slice(&bytes[4..]).unwrap();
        assert_eq!(body["kind"], "label");
        assert_eq!(body["labels"], serde_json::json!([[0, 2], [2, 1]]));
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.bin");
        {
            let j = Journal::open(&path).unwrap();
            j.append(rec("a")).unwrap();
            j.append(rec("b")).unwrap();
        }
        let mut bytes = std::fs::read(&path).unwrap();
        let full = bytes.len();
        bytes.extend_from_slice(&encode_record(&rec("c")).unwrap()[..7]);
        std::fs::write(&path, &bytes).unwrap();

        let j = Journal::open(&path).unwrap();
        assert_eq!(j.len(), 2);
        assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, full);
        j.append(rec("c")).unwrap();
        assert_eq!(read_journal(&path).unwrap().len(), 3);
    }

    #[test]
    fn first_write_wins() {
        let j = Journal::in_memory();
        assert!(j.append(rec("a")).unwrap());
        assert!(!j.append(JournalRecord::new(2, "a", &LabelOutcome::Skipped)).unwrap());
        assert_eq!(j.get("a").unwrap().outcome(), LabelOutcome::Labeled(vec![0, 0, 2]));
    }
}
