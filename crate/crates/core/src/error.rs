use std::path::PathBuf;

/// Errors raised anywhere in the solver pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("size mismatch: expected {expected}, got {got}")]
    SizeMismatch { expected: usize, got: usize },

    #[error("non-positive permeability {value} at cell {cell}")]
    NonPositivePermeability { cell: usize, value: f64 },

    #[error("invalid field value at cell {cell}: {msg}")]
    FieldValue { cell: usize, msg: String },

    #[error("unparsable token {token:?} at position {position}")]
    Parse { token: String, position: usize },

    #[error("degenerate geometry: {0}")]
    Geometry(String),

    #[error("invalid boundary conditions: {0}")]
    Boundary(String),

    #[error("singular system: zero pivot at row {row} ({context})")]
    Singular { row: usize, context: String },

    #[error("constraint matrix is rank deficient; dependent rows {rows:?}")]
    RankDeficient { rows: Vec<usize> },

    #[error("eigenproblem: {0}")]
    Eigen(String),

    #[error("incompatible Neumann data on volume {volume}: residual {residual:e}")]
    Incompatible { volume: usize, residual: f64 },

    #[error("saturation {value} out of range [0, 1]")]
    SaturationRange { value: f64 },

    #[error("CFL violation at step {step}: dt = {dt:e} exceeds dt_max = {dt_max:e}")]
    Cfl { step: usize, dt: f64, dt_max: f64 },

    #[error("saturation overshoot {overshoot:e} at volume {volume}")]
    Overshoot { volume: usize, overshoot: f64 },

    #[error("configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
