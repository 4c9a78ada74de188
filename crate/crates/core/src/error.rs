use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix entries must be finite")]
    NonFinite,

    #[error("expected {expected} entries for a {dim}x{dim} matrix, got {got}")]
    Shape { dim: usize, expected: usize, got: usize },

    #[error("matrix is not Hermitian (max asymmetry {asymmetry:.3e})")]
    NotHermitian { asymmetry: f64 },

    #[error("matrix is not unitary (defect {defect:.3e})")]
    NotUnitary { defect: f64 },

    #[error("Jacobi eigensolver did not converge after {sweeps} sweeps for H = {matrix}")]
    EigenNoConvergence { sweeps: usize, matrix: String },

    #[error("permanent oracle supports dimension <= {max}, got {dim}")]
    UnsupportedSize { dim: usize, max: usize },

    #[error("index {index} out of range for {dim} modes")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("phase {theta} outside calibrated range [{min}, {max}]")]
    OutOfRange { theta: f64, min: f64, max: f64 },

    #[error("unsupported input: {0}")]
    UnsupportedInput(String),

    #[error("visibility undefined: classical coincidence probability {denominator:.3e} is dark")]
    UndefinedVisibility { denominator: f64 },

    #[error("photon number mismatch: input has {input}, output has {output}")]
    PhotonNumberMismatch { input: usize, output: usize },

    #[error("no usable ratios at voltage {voltage} V")]
    DegenerateLikelihood { voltage: f64 },

    #[error("fit failed: {reason}")]
    FitFailure { reason: String, best: Option<Vec<f64>> },

    #[error("ill-conditioned fit: {0}")]
    IllConditioned(String),

    #[error("loss product ({input},{output}) unrecoverable: element is dark at every setpoint")]
    Unrecoverable { input: usize, output: usize },

    #[error("loss product ({input},{output}) = {value} exceeds 1; inconsistent normalisation")]
    InconsistentNormalization { input: usize, output: usize, value: f64 },

    #[error("singular Fisher term at theta = {theta}: p = {p:.3e}, dp/dtheta = {dp:.3e}")]
    SingularTerm { theta: f64, p: f64, dp: f64 },

    #[error("expected count {expected:.3e} exceeds the overflow guard")]
    Overflow { expected: f64 },

    #[error("{path}: line {line}: {message}")]
    Schema { path: PathBuf, line: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn is_fit_failure(&self) -> bool {
        matches!(self, Error::FitFailure { .. } | Error::IllConditioned(_) | Error::EigenNoConvergence { .. })
    }

    pub(crate) fn schema(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Schema { path: path.into(), line, message: message.into() }
    }
}
