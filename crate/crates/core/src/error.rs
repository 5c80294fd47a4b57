use thiserror::Error;

use mdal_autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum MdalError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("objects-per-scene range infeasible: {0}")]
    Infeasible(String),
    #[error("split would leave an empty partition ({train} train / {test} test)")]
    EmptyPartition { train: usize, test: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("ground-truth box must have positive width and height, got w={w}, h={h}")]
    InvalidBox { w: f64, h: f64 },
    #[error("anchor {w}x{h} larger than {size}px image")]
    AnchorTooLarge { w: f64, h: f64, size: usize },
    #[error("image has {got} pixels, detector expects {expected}")]
    ImageSize { got: usize, expected: usize },
    #[error("operation requires the {expected} head")]
    WrongHead { expected: &'static str },
    #[error("probability vector is not on the simplex: {0}")]
    NotOnSimplex(String),
    #[error("empty pool")]
    EmptyPool,
    #[error("budget {budget} exceeds pool of {pool}")]
    BudgetExceedsPool { budget: usize, pool: usize },
    #[error("selections differ in size: {0} vs {1}")]
    SelectionSizeMismatch(usize, usize),
    #[error("empty test set")]
    EmptyTestSet,
    #[error("test set contains no ground-truth objects")]
    NoGroundTruth,
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("training needs at least one labeled scene")]
    NoTrainingData,
    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, MdalError>;
