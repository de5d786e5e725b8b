use std::path::PathBuf;

use thiserror::Error;

/// Shape of a matrix as `(rows, cols)`.
pub type Shape = (usize, usize);

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("{op}: expected a square matrix, got {shape:?}")]
    NotSquare { op: &'static str, shape: Shape },

    #[error("{op}: matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { op: &'static str, asymmetry: f64 },

    #[error("{op}: empty input")]
    Empty { op: &'static str },

    #[error("jacobi eigensolver did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("{op}: need at least {min} rows, got {got}")]
    TooFewRows {
        op: &'static str,
        min: usize,
        got: usize,
    },

    #[error("{op}: row {row} is not unit-norm (norm {norm})")]
    NotNormalized { op: &'static str, row: usize, norm: f64 },

    #[error("non-finite gradient in parameter slice `{slice}`")]
    NonFiniteGradient { slice: String },

    #[error("loss must be a 1x1 scalar, got {shape:?}")]
    NonScalarLoss { shape: Shape },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parameter layout mismatch: {0}")]
    Layout(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Attaches the offending path to an I/O error.
    pub fn file(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| Self::File {
            path: path.to_path_buf(),
            source,
        }
    }
}
