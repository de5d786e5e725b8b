//! Self-supervised representation learning with a transformation-invariance
//! term and a covariance-contrast regularizer, at desk scale.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod ema;
pub mod eval;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod run;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::Matrix;
