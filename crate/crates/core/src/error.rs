use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: cannot broadcast {lhs:?} with {rhs:?} (only equal shapes or scalars)")]
    Broadcast {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: dtype mismatch ({lhs:?} vs {rhs:?})")]
    DTypeMismatch {
        op: &'static str,
        lhs: crate::tensor::DType,
        rhs: crate::tensor::DType,
    },
    #[error("shape {shape:?} holds {expected} elements but {actual} were given")]
    InvalidShape {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("axis {axis} out of range for rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("parameter `{name}` has no gradient")]
    MissingGradient { name: String },
    #[error("rotation needs an even output dimension, got d = {d}")]
    OddDimension { d: usize },
    #[error("invalid rank {rank}: must lie in [1, {max}]")]
    InvalidRank { rank: usize, max: usize },
    #[error("column {column} has zero norm")]
    ZeroColumn { column: usize },
    #[error("snapshot mismatch: {0}")]
    SnapshotMismatch(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("timestep {t} outside [1, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("alpha_bar is zero at timestep {t}")]
    ZeroAlphaBar { t: usize },
    #[error("sample count mismatch: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("non-finite {what} at step {step}")]
    Divergence { what: String, step: usize },
    #[error("non-finite gradient at sample {sample}, timestep {t}")]
    NonFiniteGradient { sample: usize, t: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
