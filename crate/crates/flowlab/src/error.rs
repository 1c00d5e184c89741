use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value encountered")]
    NonFinite,

    #[error("sigmoidal layer saturated: inner sum {value} is outside (0, 1)")]
    Saturation { value: f64 },

    #[error("weight constraint violated: {0}")]
    WeightConstraint(String),

    #[error("matrix is numerically singular (|det| = {det:e} <= {threshold:e})")]
    Singular { det: f64, threshold: f64 },

    #[error("monotone derivative is not positive at the probe point (value {0})")]
    NotMonotone(f64),

    #[error("root bracket not found within {doublings} doublings around {seed}")]
    BracketFailure { seed: f64, doublings: u32 },

    #[error("layer {index}: {source}")]
    AtLayer {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("handle is not serializable: {0}")]
    NotSerializable(String),

    #[error("near-identity split cap {cap} reached; max operator norm still {max_op_norm}")]
    SplitCapReached { cap: usize, max_op_norm: f64 },

    #[error("degenerate measure: {0}")]
    DegenerateMeasure(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("cell budget exceeded: {cells} cells > budget {budget}")]
    CellBudget { cells: usize, budget: usize },

    #[error("inverse evaluation failed on {failed} of {total} cells (> 1% aborts)")]
    InverseFailures { failed: usize, total: usize },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Annotate an error with the index of the layer it came from.
    pub fn at_layer(self, index: usize) -> Error {
        Error::AtLayer { index, source: Box::new(self) }
    }
}
