//! Layer-wise adaptive rate scaling with heavy-ball momentum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Parameters, Slice};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LarsConfig {
    pub trust_coefficient: f64,
    pub eps: f64,
    pub momentum: f64,
}

impl Default for LarsConfig {
    fn default() -> Self {
        Self {
            trust_coefficient: 0.001,
            eps: 1e-9,
            momentum: 0.9,
        }
    }
}

impl LarsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.trust_coefficient > 0.0) {
            return Err(Error::Config("trust_coefficient must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("LARS momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Biases and batchnorm parameters get neither weight decay nor
    /// trust-ratio scaling.
    pub fn is_excluded(slice: &Slice) -> bool {
        slice.is_bias_or_norm()
    }
}

/// Optimizer state: one momentum buffer per slice.
#[derive(Debug, Clone)]
pub struct Lars {
    pub cfg: LarsConfig,
    buffers: Vec<Matrix>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl Lars {
    pub fn new(cfg: LarsConfig, params: &Parameters) -> Self {
        let buffers = params
            .slices
            .iter()
            .map(|s| Matrix::zeros(s.value.rows(), s.value.cols()))
            .collect();
        Self { cfg, buffers }
    }

    /// One update of every slice in place.
    pub fn step(&mut self, params: &mut Parameters, grads: &[Matrix], lr: f64, weight_decay: f64) -> Result<()> {
        if grads.len() != params.slices.len() {
            return Err(Error::Layout(format!(
                "{} gradients for {} slices",
                grads.len(),
                params.slices.len()
            )));
        }
        for ((slice, g), buf) in params.slices.iter_mut().zip(grads).zip(&mut self.buffers) {
            slice.value.expect_same_shape(g, "lars_step")?;
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    slice: slice.name.clone(),
                });
            }
            let excluded = LarsConfig::is_excluded(slice);
            let w = slice.value.as_mut_slice();
            let g = g.as_slice();
            let (scale, wd) = if excluded {
                (lr, 0.0)
            } else {
                let wn = norm(w);
                let gn = norm(g);
                let local = self.cfg.trust_coefficient * wn / (gn + weight_decay * wn + self.cfg.eps);
                (lr * local, weight_decay)
            };
            for ((wv, gv), bv) in w.iter_mut().zip(g).zip(buf.as_mut_slice()) {
                let update = scale * (gv + wd * *wv);
                *bv = self.cfg.momentum * *bv + update;
                *wv -= *bv;
            }
        }
        Ok(())
    }
}
