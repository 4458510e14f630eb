//! The closed active-learning loop: partition, initial pick, train, then
//! repeated score, select, label, pseudo-label and retrain until the budget
//! is spent.

pub mod config;
pub mod journal;
pub mod labeler;
pub mod log;
pub mod run;

pub use config::{DataConfig, RunConfig, ToggleOverrides, Toggles};
pub use journal::{read_journal, Journal, JournalRecord, JournaledLabeler};
pub use labeler::{oracle_label, LabelOutcome, Labeler, OracleLabeler};
pub use log::{LogRecord, RunLog};
pub use run::{derive_seed, eval_checkpoint, labeled_iou, run_loop, RunOutcome, RunState};

use crate::dataset::Dataset;
use crate::error::Result;
use crate::synth::synth_dataset;

/// The dataset a config points at: a directory, or a generated synthetic set.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.path {
        Some(path) => Dataset::load(path),
        None => synth_dataset(cfg.data.seed, &cfg.data.synth),
    }
}
