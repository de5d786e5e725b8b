//! Exponential moving averages of the momentum parameters and of the
//! embedding covariance, plus an explicit FIFO memory bank.
//!
//! The memory bank is never used for training. It exists so the covariance
//! rewrite of the memory-bank loss can be checked against the real thing.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::Parameters;

/// Accepted deviation of an embedding row's norm from one.
pub const UNIT_NORM_TOL: f64 = 1e-9;

fn check_unit_rows(op: &'static str, z: &Matrix) -> Result<()> {
    for (row, norm) in z.row_norms().into_iter().enumerate() {
        if !((norm - 1.0).abs() <= UNIT_NORM_TOL) {
            return Err(Error::NotNormalized { op, row, norm });
        }
    }
    Ok(())
}

fn check_unit_interval(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

/// `ξ ← α ξ + (1 − α) θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub alpha: f64,
    pub xi: Parameters,
}

impl MomentumState {
    pub fn new(alpha: f64, xi: Parameters) -> Result<Self> {
        check_unit_interval("alpha", alpha)?;
        Ok(Self { alpha, xi })
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        check_unit_interval("alpha", alpha)?;
        self.alpha = alpha;
        Ok(())
    }

    pub fn update(&mut self, theta: &Parameters) -> Result<()> {
        self.xi.check_compatible(theta)?;
        let a = self.alpha;
        for (xi, th) in self.xi.slices.iter_mut().zip(&theta.slices) {
            for (x, t) in xi.value.as_mut_slice().iter_mut().zip(th.value.as_slice()) {
                *x = a * *x + (1.0 - a) * t;
            }
        }
        Ok(())
    }
}

/// `C_t = β C_{t−1} + (1 − β) ZᵀZ / n`, with `C_0 = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceState {
    pub beta: f64,
    pub c: Matrix,
    pub step: u64,
}

impl CovarianceState {
    pub fn new(dim: usize, beta: f64) -> Result<Self> {
        check_unit_interval("beta", beta)?;
        Ok(Self {
            beta,
            c: Matrix::zeros(dim, dim),
            step: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.c.rows()
    }

    /// Folds one batch of unit-norm embeddings into the running covariance.
    pub fn update(&mut self, z: &Matrix) -> Result<()> {
        if z.cols() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "update_covariance",
                left: self.c.shape(),
                right: z.shape(),
            });
        }
        check_unit_rows("update_covariance", z)?;
        let batch = z.covariance()?;
        self.fold(&batch)
    }

    /// Same as [`CovarianceState::update`] for an already computed batch
    /// covariance.
    pub fn fold(&mut self, batch: &Matrix) -> Result<()> {
        self.c.expect_same_shape(batch, "fold_covariance")?;
        let b = self.beta;
        for (c, x) in self.c.as_mut_slice().iter_mut().zip(batch.as_slice()) {
            *c = b * *c + (1.0 - b) * x;
        }
        self.c.mirror_upper();
        self.step += 1;
        Ok(())
    }
}

/// FIFO store of past unit-norm embeddings.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<f64>>,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends rows, evicting the oldest entries beyond capacity.
    pub fn push(&mut self, z: &Matrix) -> Result<()> {
        if z.cols() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "bank_push",
                left: (self.capacity, self.dim),
                right: z.shape(),
            });
        }
        check_unit_rows("bank_push", z)?;
        for r in 0..z.rows() {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            if self.capacity > 0 {
                self.entries.push_back(z.row(r).to_vec());
            }
        }
        Ok(())
    }

    /// Entries as rows, newest last.
    pub fn to_matrix(&self) -> Matrix {
        let rows: Vec<&[f64]> = self.entries.iter().map(Vec::as_slice).collect();
        if rows.is_empty() {
            return Matrix::zeros(0, self.dim);
        }
        Matrix::from_rows(&rows)
    }

    /// `(1/m) Σⱼ zⱼ zⱼᵀ` over the stored entries.
    pub fn covariance(&self) -> Result<Matrix> {
        if self.entries.is_empty() {
            return Err(Error::Empty {
                op: "bank_covariance",
            });
        }
        self.to_matrix().covariance()
    }
}
