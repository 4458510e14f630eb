use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex, MutexGuard, PoisonError};

use albalance::dataset::Dataset;
use albalance::harness::{Journal, JournalRecord, JournaledLabeler, LabelOutcome, Labeler, LogRecord};
use albalance::raster::RasterImage;
use albalance::rle::{decode_labels, encode_indices, LabelRun};
use albalance::units::{LabelingUnit, UnitKind};
use albalance::{Error, Result};
use base64::Engine;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Before the first labeling round.
    Starting,
    Labeling,
    /// Between rounds: retraining, scoring, selecting.
    Training,
    Finished,
}

struct Round {
    iteration: usize,
    units: Vec<LabelingUnit>,
    answers: HashMap<String, LabelOutcome>,
}

struct State {
    phase: Phase,
    round: Option<Round>,
    history: Vec<LogRecord>,
    labeled_pixels: u64,
    closed: bool,
}

/// State shared between the loop thread and the HTTP handlers.
pub struct Session {
    state: Mutex<State>,
    changed: Condvar,
    journal: Journal,
    images: HashMap<String, RasterImage>,
    class_names: Vec<String>,
    total_pixels: u64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Submission {
    pub unit_id: String,
    /// `[class, count]` runs over the unit's mask pixels in mask order.
    #[serde(default)]
    pub rle_labels: Option<Vec<LabelRun>>,
    #[serde(default)]
    pub skip: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmitReceipt {
    pub unit_id: String,
    pub skipped: bool,
    pub labeled_pixels: u64,
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SubmitError {
    /// The unit is not in the current round and was never decided.
    UnknownUnit(String),
    /// The unit already has an answer.
    AlreadyDecided(String),
    Invalid(String),
    Storage(String),
}

impl std::fmt::Display for SubmitError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::UnknownUnit(id) => write!(f, "unknown unit {id}"),
            Self::AlreadyDecided(id) => write!(f, "unit {id} already has an answer"),
            Self::Invalid(reason) => f.write_str(reason),
            Self::Storage(reason) => write!(f, "journal write failed: {reason}"),
        }
    }
}

impl std::error::Error for SubmitError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

/// Unit mask relative to its bounding-box crop, as skip/take runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitMask {
    pub unit_id: String,
    pub bbox: BoundingBox,
    pub rle_mask: Vec<u32>,
    pub cost: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueueItem {
    pub unit_id: String,
    pub image_id: String,
    pub kind: UnitKind,
    pub iteration: usize,
    pub cost: u64,
    pub bbox: BoundingBox,
    pub rle_mask: Vec<u32>,
    pub image_png_base64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionStatus {
    pub phase: Phase,
    pub iteration: Option<usize>,
    pub queue_len: usize,
    pub labeled_pixels: u64,
    pub total_pixels: u64,
    pub budget_fraction: f64,
    pub class_names: Vec<String>,
    pub records: usize,
}

impl Session {
    pub fn new(data: &Dataset, journal: Journal) -> Arc<Self> {
        Arc::new(Self {
            state: Mutex::new(State {
                phase: Phase::Starting,
                round: None,
                history: Vec::new(),
                labeled_pixels: 0,
                closed: false,
            }),
            changed: Condvar::new(),
            journal,
            images: data.train.iter().map(|s| (s.id.clone(), s.image.clone())).collect(),
            class_names: data.class_names.clone(),
            total_pixels: data.train_pixels(),
        })
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(PoisonError::into_inner)
    }

    pub fn journal(&self) -> &Journal {
        &self.journal
    }

    /// Labeler for the loop thread that answers from the journal first.
    pub fn labeler(self: &Arc<Self>) -> JournaledLabeler<HumanLabeler> {
        JournaledLabeler {
            inner: HumanLabeler {
                session: Arc::clone(self),
            },
            journal: self.journal.clone(),
        }
    }

    /// Makes a waiting labeler fail instead of blocking forever.
    pub fn close(&self) {
        self.lock().closed = true;
        self.changed.notify_all();
    }

    pub fn status(&self) -> SessionStatus {
        let st = self.lock();
        SessionStatus {
            phase: st.phase,
            iteration: st
                .round
                .as_ref()
                .map(|r| r.iteration)
                .or_else(|| st.history.last().map(|r| r.iteration)),
            queue_len: pending(&st).len(),
            labeled_pixels: st.labeled_pixels,
            total_pixels: self.total_pixels,
            budget_fraction: st.labeled_pixels as f64 / self.total_pixels.max(1) as f64,
            class_names: self.class_names.clone(),
            records: st.history.len(),
        }
    }

    pub fn history(&self) -> Vec<LogRecord> {
        self.lock().history.clone()
    }

    /// Unit of the current round, answered or not.
    pub fn unit(&self, id: &str) -> Option<LabelingUnit> {
        let st = self.lock();
        st.round.as_ref()?.units.iter().find(|u| u.id == id).cloned()
    }

    /// Units of the current round still waiting for an answer.
    pub fn queue(&self) -> Result<Vec<QueueItem>> {
        let (iteration, units) = {
            let st = self.lock();
            let Some(round) = st.round.as_ref() else {
                return Ok(Vec::new());
            };
            (round.iteration, pending(&st))
        };
        units
            .into_iter()
            .map(|u| {
                let mask = self.mask(&u)?;
                let png = self.crop_png(&u)?;
                Ok(QueueItem {
                    unit_id: u.id.clone(),
                    image_id: u.image_id.clone(),
                    kind: u.kind,
                    iteration,
                    cost: u.cost(),
                    bbox: mask.bbox,
                    rle_mask: mask.rle_mask,
                    image_png_base64: base64::engine::general_purpose::STANDARD.encode(png),
                })
            })
            .collect()
    }

    fn image(&self, unit: &LabelingUnit) -> Result<&RasterImage> {
        self.images
            .get(&unit.image_id)
            .ok_or_else(|| Error::UnitOutsideTruth {
                unit: unit.id.clone(),
                reason: format!("no image {}", unit.image_id),
            })
    }

    pub fn mask(&self, unit: &LabelingUnit) -> Result<UnitMask> {
        let width = self.image(unit)?.width();
        let (row, col, height, w) = unit.bbox(width);
        let local: Vec<usize> = unit
            .mask
            .iter()
            .map(|&p| (p / width - row) * w + (p % width - col))
            .collect();
        Ok(UnitMask {
            unit_id: unit.id.clone(),
            bbox: BoundingBox {
                row,
                col,
                height,
                width: w,
            },
            rle_mask: encode_indices(&local),
            cost: unit.cost(),
        })
    }

    pub fn crop_png(&self, unit: &LabelingUnit) -> Result<Vec<u8>> {
        let img = self.image(unit)?;
        let (r, c, h, w) = unit.bbox(img.width());
        img.crop(r, c, h, w)?.to_png_bytes()
    }

    /// Validates, journals and records one answer.
    pub fn submit(&self, sub: Submission) -> std::result::Result<SubmitReceipt, SubmitError> {
        let mut st = self.lock();
        let Some(round) = st.round.as_ref() else {
            return Err(self.not_queued(&sub.unit_id));
        };
        let Some(unit) = round.units.iter().find(|u| u.id == sub.unit_id) else {
            return Err(self.not_queued(&sub.unit_id));
        };
        if round.answers.contains_key(&unit.id) {
            return Err(SubmitError::AlreadyDecided(unit.id.clone()));
        }
        let outcome = match (sub.skip, &sub.rle_labels) {
            (true, None) => LabelOutcome::Skipped,
            (false, Some(runs)) => LabelOutcome::Labeled(self.check_labels(unit, runs)?),
            (true, Some(_)) => return Err(SubmitError::Invalid("skip and rle_labels are exclusive".into())),
            (false, None) => return Err(SubmitError::Invalid("rle_labels or skip is required".into())),
        };
        let written = self
            .journal
            .append(JournalRecord::new(round.iteration, &unit.id, &outcome))
            .map_err(|e| SubmitError::Storage(e.to_string()))?;
        if !written {
            return Err(SubmitError::AlreadyDecided(unit.id.clone()));
        }
        let (id, cost) = (unit.id.clone(), unit.cost());
        let skipped = outcome == LabelOutcome::Skipped;
        if !skipped {
            // Provisional until the next log record restates the total.
            st.labeled_pixels += cost;
        }
        st.round
            .as_mut()
            .expect("round checked above")
            .answers
            .insert(id.clone(), outcome);
        let remaining = pending(&st).len();
        let labeled_pixels = st.labeled_pixels;
        drop(st);
        self.changed.notify_all();
        Ok(SubmitReceipt {
            unit_id: id,
            skipped,
            labeled_pixels,
            remaining,
        })
    }

    fn not_queued(&self, id: &str) -> SubmitError {
        if self.journal.get(id).is_some() {
            SubmitError::AlreadyDecided(id.to_string())
        } else {
            SubmitError::UnknownUnit(id.to_string())
        }
    }

    fn check_labels(&self, unit: &LabelingUnit, runs: &[LabelRun]) -> std::result::Result<Vec<u8>, SubmitError> {
        let c = self.class_names.len();
        if let Some(LabelRun(bad, _)) = runs.iter().find(|r| usize::from(r.0) >= c) {
            return Err(SubmitError::Invalid(format!("class {bad} outside {c} classes")));
        }
        let total: u64 = runs.iter().map(|r| u64::from(r.1)).sum();
        if total != unit.cost() {
            return Err(SubmitError::Invalid(format!(
                "labels cover {total} pixels but the unit has {}",
                unit.cost()
            )));
        }
        Ok(decode_labels(runs))
    }
}

fn pending(st: &State) -> Vec<LabelingUnit> {
    st.round
        .as_ref()
        .map(|r| {
            r.units
                .iter()
                .filter(|u| !r.answers.contains_key(&u.id))
                .cloned()
                .collect()
        })
        .unwrap_or_default()
}

/// Loop-side half of a [`Session`].
pub struct HumanLabeler {
    session: Arc<Session>,
}

impl Labeler for HumanLabeler {
    fn label_batch(&mut self, iteration: usize, units: &[LabelingUnit]) -> Result<Vec<LabelOutcome>> {
        if units.is_empty() {
            return Ok(Vec::new());
        }
        let s = &self.session;
        let mut st = s.lock();
        st.round = Some(Round {
            iteration,
            units: units.to_vec(),
            answers: HashMap::new(),
        });
        st.phase = Phase::Labeling;
        log::info!("iteration {iteration}: {} units queued for annotation", units.len());
        s.changed.notify_all();
        let mut st = s
            .changed
            .wait_while(st, |st| {
                !st.closed && st.round.as_ref().is_some_and(|r| r.answers.len() < r.units.len())
            })
            .unwrap_or_else(PoisonError::into_inner);
        if st.closed {
            return Err(Error::Labeler("annotation session closed".into()));
        }
        let mut round = st.round.take().expect("round set above");
        st.phase = Phase::Training;
        Ok(units
            .iter()
            .map(|u| round.answers.remove(&u.id).expect("every unit answered"))
            .collect())
    }

    fn on_record(&mut self, record: &LogRecord) {
        let mut st = self.session.lock();
        st.labeled_pixels = record.labeled_pixels;
        st.history.push(record.clone());
    }

    fn on_finish(&mut self) {
        self.session.lock().phase = Phase::Finished;
        self.session.changed.notify_all();
    }
}
