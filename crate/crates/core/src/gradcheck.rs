//! Central finite-difference gradient checking.
//!
//! Only forward values are read here; the analytic side comes from
//! [`Tape::backward`], so the two routes share nothing but the forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::linalg::Matrix;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Max accepted relative error between analytic and numeric gradients.
pub const FD_TOL: f64 = 1e-5;

/// Relative error with a floor of one in the denominator, so entries with
/// tiny gradients are compared in absolute terms.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Worst relative error between backprop and central differences over every
/// entry of every input. Each input is registered as a parameter leaf.
pub fn max_relative_error<F>(inputs: &[Matrix], h: f64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |point: &[Matrix]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = point.iter().map(|m| tape.param(m.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut worst: f64 = 0.0;
    let mut point = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for e in 0..inputs[k].len() {
            let orig = inputs[k].as_slice()[e];
            point[k].as_mut_slice()[e] = orig + h;
            let up = eval(&point)?;
            point[k].as_mut_slice()[e] = orig - h;
            let down = eval(&point)?;
            point[k].as_mut_slice()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic.as_slice()[e], numeric));
        }
    }
    Ok(worst)
}

/// Asserts-style wrapper used by unit tests: errors are propagated, a failed
/// comparison panics with the measured error.
pub fn check<F>(inputs: &[Matrix], f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let err = max_relative_error(inputs, FD_STEP, f)?;
    assert!(err < FD_TOL, "finite-difference mismatch: {err:e}");
    Ok(err)
}

/// Uniform(-1, 1) entries from a seeded stream.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized buffer")
}

/// Random matrix with unit-norm rows.
pub fn random_unit_rows(rows: usize, cols: usize, seed: u64) -> Matrix {
    random_matrix(rows, cols, seed).normalize_rows(crate::linalg::NORMALIZE_EPS)
}
