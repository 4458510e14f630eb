use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("pixel index {index} out of bounds for {len} pixels")]
    OutOfBounds { index: usize, len: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("no decided pixels")]
    NoDecidedPixels,

    #[error("empty mask")]
    EmptyMask,

    #[error("empty pool")]
    EmptyPool,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("image {height}x{width} is smaller than the {kernel}px kernel")]
    DegenerateImage {
        height: usize,
        width: usize,
        kernel: usize,
    },

    #[error("bad magic")]
    BadMagic,

    #[error("unsupported format version {0}")]
    BadVersion(u8),

    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),

    #[error("unsupported ndim {0}")]
    BadNdim(u8),

    #[error("dimension overflow: {0:?}")]
    DimOverflow(Vec<u32>),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("unknown unit {0}")]
    UnknownUnit(String),

    #[error("unit {unit} is outside the truth mask ({reason})")]
    UnitOutsideTruth { unit: String, reason: String },

    #[error("budget of {budget} px is below the cheapest unit ({min_cost} px)")]
    BudgetTooSmall { budget: u64, min_cost: u64 },

    #[error("infeasible class proportions: {0}")]
    InfeasibleProportions(String),

    #[error("journal: {0}")]
    Journal(String),

    #[error("labeler: {0}")]
    Labeler(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
