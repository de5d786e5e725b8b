//! Joint-embedding losses: the transformation-invariance / covariance-contrast
//! loss, the squared contrastive loss (batch and memory-bank forms), its
//! covariance rewrite, InfoNCE, and Barlow Twins with its expansion.
//!
//! Embeddings are rows. Each loss has a plain numeric evaluation; the ones used
//! for training also have a taped version differentiable in the first view.

use serde::{Deserialize, Serialize};

use crate::autodiff::{logsumexp, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Standard-deviation floor for batch-dimension standardization.
pub const BARLOW_STD_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Covariance-contrast weight.
    pub rho: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Barlow Twins off-diagonal weight.
    pub barlow_lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            rho: 8.0,
            tau: 0.2,
            barlow_lambda: 0.005,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("rho", self.rho), ("tau", self.tau), ("barlow_lambda", self.barlow_lambda)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Tico,
    Infonce,
    Barlow,
    Squared,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Tico, LossKind::Infonce, LossKind::Barlow, LossKind::Squared];

    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Tico => "tico",
            LossKind::Infonce => "infonce",
            LossKind::Barlow => "barlow",
            LossKind::Squared => "squared",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tico" => Ok(LossKind::Tico),
            "infonce" => Ok(LossKind::Infonce),
            "barlow" => Ok(LossKind::Barlow),
            "squared" => Ok(LossKind::Squared),
            other => Err(Error::Config(format!("unknown loss kind `{other}`"))),
        }
    }
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn check_square(op: &'static str, z: &Matrix, c: &Matrix) -> Result<()> {
    if c.shape() != (z.cols(), z.cols()) {
        return Err(Error::ShapeMismatch {
            op,
            left: z.shape(),
            right: c.shape(),
        });
    }
    Ok(())
}

/// Mean of the row-wise inner products `z1ᵢ · z2ᵢ`.
pub fn mean_alignment(z1: &Matrix, z2: &Matrix) -> Result<f64> {
    same_shape("alignment", z1, z2)?;
    let total: f64 = (0..z1.rows())
        .map(|i| z1.row(i).iter().zip(z2.row(i)).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    Ok(total / z1.rows() as f64)
}

/// `(1/n) Σᵢ z1ᵢᵀ C z1ᵢ`.
pub fn mean_quadratic_form(z1: &Matrix, c: &Matrix) -> Result<f64> {
    check_square("quadratic_form", z1, c)?;
    Ok(z1.matmul(c)?.hadamard(z1)?.sum() / z1.rows() as f64)
}

/// The two named terms of the transformation-invariance / covariance-contrast
/// loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TicoParts {
    /// `1 − (1/n) Σ z1ᵢ·z2ᵢ`, i.e. `(1/2n) Σ ‖z1ᵢ − z2ᵢ‖²` for unit rows.
    pub invariance: f64,
    /// `(ρ/n) Σ z1ᵢᵀ C z1ᵢ`.
    pub contrast: f64,
}

impl TicoParts {
    pub fn total(&self) -> f64 {
        self.invariance + self.contrast
    }
}

pub fn tico_parts(z1: &Matrix, z2: &Matrix, c: &Matrix, rho: f64) -> Result<TicoParts> {
    Ok(TicoParts {
        invariance: 1.0 - mean_alignment(z1, z2)?,
        contrast: rho * mean_quadratic_form(z1, c)?,
    })
}

/// `1 − (1/n) Σ z1ᵢ·z2ᵢ + (ρ/n) Σ z1ᵢᵀ C z1ᵢ`.
pub fn tico_loss(z1: &Matrix, z2: &Matrix, c: &Matrix, rho: f64) -> Result<f64> {
    Ok(tico_parts(z1, z2, c, rho)?.total())
}

/// Squared contrastive loss over in-batch negatives (`j ≠ i`), weight `ρ/n²`.
pub fn squared_contrastive_batch(z1: &Matrix, z2: &Matrix, rho: f64) -> Result<f64> {
    same_shape("squared_contrastive_batch", z1, z2)?;
    let n = z1.rows();
    let s = z1.matmul_t(z2)?;
    let mut off = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                off += s[(i, j)] * s[(i, j)];
            }
        }
    }
    Ok(-s.trace() / n as f64 + rho * off / (n * n) as f64)
}

/// Squared contrastive loss against `m ≥ n` negatives, all pairs included,
/// weight `ρ/(nm)`.
pub fn squared_contrastive_membank(
    z1: &Matrix,
    negatives: &Matrix,
    positives: &Matrix,
    rho: f64,
) -> Result<f64> {
    same_shape("squared_contrastive_membank", z1, positives)?;
    if negatives.cols() != z1.cols() {
        return Err(Error::ShapeMismatch {
            op: "squared_contrastive_membank",
            left: z1.shape(),
            right: negatives.shape(),
        });
    }
    let (n, m) = (z1.rows(), negatives.rows());
    if m < n {
        return Err(Error::TooFewRows {
            op: "squared_contrastive_membank (negatives)",
            min: n,
            got: m,
        });
    }
    let s = z1.matmul_t(negatives)?;
    Ok(-mean_alignment(z1, positives)? + rho * s.frobenius_norm_sq() / (n * m) as f64)
}

/// Covariance rewrite of the memory-bank loss:
/// `−(1/n) Σ z1ᵢ·z2ᵢ + (ρ/n) Σ z1ᵢᵀ C z1ᵢ`.
pub fn covariance_form(z1: &Matrix, z2: &Matrix, c_avg: &Matrix, rho: f64) -> Result<f64> {
    Ok(-mean_alignment(z1, z2)? + rho * mean_quadratic_form(z1, c_avg)?)
}

/// InfoNCE with temperature `tau`, evaluated with log-sum-exp stabilization.
pub fn infonce(z1: &Matrix, z2: &Matrix, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    same_shape("infonce", z1, z2)?;
    let n = z1.rows();
    let s = z1.matmul_t(z2)?.scale(1.0 / tau);
    let lse: f64 = (0..n).map(|i| logsumexp(s.row(i))).sum();
    Ok(-mean_alignment(z1, z2)? + tau * lse / n as f64)
}

/// Cross-correlation `Z1_Bᵀ Z2_B / n` of the batch-standardized views.
pub fn cross_correlation(z1_raw: &Matrix, z2_raw: &Matrix) -> Result<Matrix> {
    same_shape("cross_correlation", z1_raw, z2_raw)?;
    let a = z1_raw.standardize_columns(BARLOW_STD_EPS)?;
    let b = z2_raw.standardize_columns(BARLOW_STD_EPS)?;
    Ok(a.t_matmul(&b)?.scale(1.0 / z1_raw.rows() as f64))
}

/// Barlow Twins: `(1/d) Σ (1 − C′ᵢᵢ)² + (λ/d) Σ_{i≠j} C′ᵢⱼ²`.
pub fn barlow_twins(z1_raw: &Matrix, z2_raw: &Matrix, lambda: f64) -> Result<f64> {
    let c = cross_correlation(z1_raw, z2_raw)?;
    let d = c.rows();
    let mut on = 0.0;
    let mut off = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i == j {
                on += (1.0 - c[(i, i)]).powi(2);
            } else {
                off += c[(i, j)].powi(2);
            }
        }
    }
    Ok((on + lambda * off) / d as f64)
}

/// Barlow Twins with the off-diagonal cross-correlation replaced by the
/// auto-correlation `C_B = Z1_Bᵀ Z1_B / n`.
pub fn barlow_substituted(z1_raw: &Matrix, z2_raw: &Matrix, lambda: f64) -> Result<f64> {
    let cross = cross_correlation(z1_raw, z2_raw)?;
    let auto = cross_correlation(z1_raw, z1_raw)?;
    let d = cross.rows();
    let mut on = 0.0;
    let mut off = 0.0;
    for i in 0..d {
        on += (1.0 - cross[(i, i)]).powi(2);
        for j in 0..d {
            if i != j {
                off += auto[(i, j)].powi(2);
            }
        }
    }
    Ok((on + lambda * off) / d as f64)
}

/// Expanded form of [`barlow_substituted`]:
/// `1 + (1/d) Σ C′ᵢᵢ² − (2/d) Tr(C′) − λ + (λ/d) ‖C_B‖²_F`.
///
/// The `−λ` uses `(C_B)ᵢᵢ = 1`, which holds for every non-constant column.
pub fn barlow_expanded(z1_raw: &Matrix, z2_raw: &Matrix, lambda: f64) -> Result<f64> {
    let cross = cross_correlation(z1_raw, z2_raw)?;
    let auto = cross_correlation(z1_raw, z1_raw)?;
    let d = cross.rows() as f64;
    let diag_sq: f64 = (0..cross.rows()).map(|i| cross[(i, i)].powi(2)).sum();
    Ok(1.0 + diag_sq / d - 2.0 * cross.trace() / d - lambda + lambda * auto.frobenius_norm_sq() / d)
}

// Taped versions. The second view and any covariance are constants.

fn tape_same_shape(op: &'static str, z1: &Var<'_>, z2: &Matrix) -> Result<()> {
    if z1.shape() != z2.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: z1.shape(),
            right: z2.shape(),
        });
    }
    Ok(())
}

pub fn tico_loss_var<'t>(z1: Var<'t>, z2: &Matrix, c: &Matrix, rho: f64) -> Result<Var<'t>> {
    tape_same_shape("tico_loss", &z1, z2)?;
    let tape = z1.tape();
    let n = z1.shape().0 as f64;
    let align = z1.rowwise_dot(&tape.constant(z2.clone()))?.sum().scale(-1.0 / n);
    let contrast = z1.quad_form_sum(c)?.scale(rho / n);
    let one = tape.constant(Matrix::scalar(1.0));
    one.add(&align)?.add(&contrast)
}

pub fn squared_contrastive_batch_var<'t>(z1: Var<'t>, z2: &Matrix, rho: f64) -> Result<Var<'t>> {
    tape_same_shape("squared_contrastive_batch", &z1, z2)?;
    let tape = z1.tape();
    let n = z1.shape().0;
    let s = z1.matmul(&tape.constant(z2.transpose()))?;
    let mut mask = Matrix::filled(n, n, 1.0);
    for i in 0..n {
        mask[(i, i)] = 0.0;
    }
    let off = s.mul(&s)?.mul(&tape.constant(mask))?.sum().scale(rho / (n * n) as f64);
    let align = z1.rowwise_dot(&tape.constant(z2.clone()))?.sum().scale(-1.0 / n as f64);
    align.add(&off)
}

pub fn infonce_var<'t>(z1: Var<'t>, z2: &Matrix, tau: f64) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    tape_same_shape("infonce", &z1, z2)?;
    let tape = z1.tape();
    let n = z1.shape().0 as f64;
    let s = z1.matmul(&tape.constant(z2.transpose()))?.scale(1.0 / tau);
    let lse = s.row_logsumexp().sum().scale(tau / n);
    let align = z1.rowwise_dot(&tape.constant(z2.clone()))?.sum().scale(-1.0 / n);
    align.add(&lse)
}

pub fn barlow_twins_var<'t>(z1_raw: Var<'t>, z2_raw: &Matrix, lambda: f64) -> Result<Var<'t>> {
    tape_same_shape("barlow_twins", &z1_raw, z2_raw)?;
    let tape = z1_raw.tape();
    let (n, d) = z1_raw.shape();
    let ones = tape.constant(Matrix::filled(1, d, 1.0));
    let zeros = tape.constant(Matrix::zeros(1, d));
    let a = z1_raw.batchnorm(&ones, &zeros, BARLOW_STD_EPS * BARLOW_STD_EPS)?;
    let b = tape.constant(z2_raw.standardize_columns(BARLOW_STD_EPS)?);
    let c = a.transpose().matmul(&b)?.scale(1.0 / n as f64);
    let diff = c.sub(&tape.constant(Matrix::identity(d)))?;
    let mut weights = Matrix::filled(d, d, lambda);
    for i in 0..d {
        weights[(i, i)] = 1.0;
    }
    Ok(diff.mul(&diff)?.mul(&tape.constant(weights))?.sum().scale(1.0 / d as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::{check, random_matrix, random_unit_rows};

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn tico_loop(z1: &Matrix, z2: &Matrix, c: &Matrix, rho: f64) -> f64 {
        let (n, d) = z1.shape();
        let mut align = 0.0;
        let mut quad = 0.0;
        for i in 0..n {
            align += dot(z1.row(i), z2.row(i));
            for a in 0..d {
                for b in 0..d {
                    quad += z1[(i, a)] * c[(a, b)] * z1[(i, b)];
                }
            }
        }
        1.0 - align / n as f64 + rho * quad / n as f64
    }

    #[test]
    fn tico_hand_cases() {
        let z = random_unit_rows(5, 4, 1);
        assert!(tico_loss(&z, &z, &Matrix::zeros(4, 4), 3.0).unwrap().abs() < 1e-15);
        let z1 = Matrix::from_rows(&[[0.6, 0.8]]);
        let c = z1.t_matmul(&z1).unwrap();
        assert!((tico_loss(&z1, &z1, &c, 1.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tico_matches_loop_oracle() {
        let z1 = random_unit_rows(8, 4, 2);
        let z2 = random_unit_rows(8, 4, 3);
        let c = random_unit_rows(20, 4, 4).covariance().unwrap();
        let got = tico_loss(&z1, &z2, &c, 8.0).unwrap();
        assert!((got - tico_loop(&z1, &z2, &c, 8.0)).abs() < 1e-12);
        let tape = Tape::new();
        let v = tico_loss_var(tape.param(z1.clone()), &z2, &c, 8.0).unwrap();
        assert!((v.item() - got).abs() < 1e-12);
    }

    #[test]
    fn squared_batch_cases() {
        let z1 = Matrix::from_rows(&[[0.6, 0.8, 0.0]]);
        let z2 = Matrix::from_rows(&[[0.0, 0.6, 0.8]]);
        assert!((squared_contrastive_batch(&z1, &z2, 5.0).unwrap() + 0.48).abs() < 1e-15);

        let e = Matrix::identity(3);
        assert!((squared_contrastive_batch(&e, &e, 9.0).unwrap() + 1.0).abs() < 1e-15);

        let z1 = random_unit_rows(6, 5, 5);
        let z2 = random_unit_rows(6, 5, 6);
        let mut oracle = 0.0;
        for i in 0..6 {
            oracle -= dot(z1.row(i), z2.row(i)) / 6.0;
            for j in 0..6 {
                if i != j {
                    oracle += 2.0 * dot(z1.row(i), z2.row(j)).powi(2) / 36.0;
                }
            }
        }
        assert!((squared_contrastive_batch(&z1, &z2, 2.0).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn membank_vs_batch_difference() {
        let (n, rho) = (5, 3.0);
        let z1 = random_unit_rows(n, 4, 7);
        let z2 = random_unit_rows(n, 4, 8);
        let bank = squared_contrastive_membank(&z1, &z2, &z2, rho).unwrap();
        let batch = squared_contrastive_batch(&z1, &z2, rho).unwrap();
        // With m = n the bank form adds the diagonal pairs; the weights coincide.
        let diag: f64 = (0..n).map(|i| dot(z1.row(i), z2.row(i)).powi(2)).sum();
        assert!((bank - batch - rho * diag / (n * n) as f64).abs() < 1e-12);
    }

    #[test]
    fn membank_orthogonal_and_loop() {
        let z1 = Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]);
        let neg = Matrix::from_rows(&[[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 0.6, 0.8]]);
        let pos = neg.select_rows(&[0, 1]);
        assert_eq!(squared_contrastive_membank(&z1, &neg, &pos, 4.0).unwrap(), 0.0);
        assert!(squared_contrastive_membank(&z1, &pos.select_rows(&[0]), &pos, 1.0).is_err());

        let z1 = random_unit_rows(3, 4, 9);
        let neg = random_unit_rows(7, 4, 10);
        let pos = neg.select_rows(&[0, 1, 2]);
        let mut oracle = 0.0;
        for i in 0..3 {
            oracle -= dot(z1.row(i), pos.row(i)) / 3.0;
            for j in 0..7 {
                oracle += 1.5 * dot(z1.row(i), neg.row(j)).powi(2) / 21.0;
            }
        }
        assert!((squared_contrastive_membank(&z1, &neg, &pos, 1.5).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn covariance_form_cases() {
        let z1 = random_unit_rows(4, 5, 11);
        let z2 = random_unit_rows(4, 5, 12);
        let align = -mean_alignment(&z1, &z2).unwrap();
        assert_eq!(covariance_form(&z1, &z2, &Matrix::zeros(5, 5), 2.0).unwrap(), align);
        let iso = Matrix::identity(5).scale(1.0 / 5.0);
        assert!((covariance_form(&z1, &z2, &iso, 2.0).unwrap() - (align + 2.0 / 5.0)).abs() < 1e-15);
    }

    #[test]
    fn infonce_cases() {
        let z1 = random_unit_rows(1, 3, 13);
        let z2 = random_unit_rows(1, 3, 14);
        for tau in [0.05, 0.5, 2.0] {
            assert!(infonce(&z1, &z2, tau).unwrap().abs() < 1e-12);
        }
        let e = Matrix::identity(2);
        let expected = -1.0 + (1f64.exp() + 1.0).ln();
        assert!((infonce(&e, &e, 1.0).unwrap() - expected).abs() < 1e-15);
        assert!(infonce(&e, &e, 0.0).is_err());

        let z1 = random_unit_rows(6, 4, 15);
        let z2 = random_unit_rows(6, 4, 16);
        let tau = 0.5;
        let mut oracle = 0.0;
        for i in 0..6 {
            oracle -= dot(z1.row(i), z2.row(i)) / 6.0;
            let s: f64 = (0..6).map(|j| (dot(z1.row(i), z2.row(j)) / tau).exp()).sum();
            oracle += tau * s.ln() / 6.0;
        }
        assert!((infonce(&z1, &z2, tau).unwrap() - oracle).abs() < 1e-9);
    }

    fn barlow_loop(z1: &Matrix, z2: &Matrix, lambda: f64) -> f64 {
        let (n, d) = z1.shape();
        let standardize = |z: &Matrix, c: usize| -> Vec<f64> {
            let col = z.column(c);
            let mean = col.iter().sum::<f64>() / n as f64;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            col.iter().map(|v| (v - mean) / std).collect()
        };
        let a: Vec<Vec<f64>> = (0..d).map(|c| standardize(z1, c)).collect();
        let b: Vec<Vec<f64>> = (0..d).map(|c| standardize(z2, c)).collect();
        let mut loss = 0.0;
        for i in 0..d {
            for j in 0..d {
                let cij = dot(&a[i], &b[j]) / n as f64;
                loss += if i == j { (1.0 - cij).powi(2) } else { lambda * cij * cij };
            }
        }
        loss / d as f64
    }

    #[test]
    fn barlow_cases() {
        let z1 = random_matrix(10, 4, 17);
        let z2 = random_matrix(10, 4, 18);
        let got = barlow_twins(&z1, &z2, 0.3).unwrap();
        assert!((got - barlow_loop(&z1, &z2, 0.3)).abs() < 1e-12);
        let tape = Tape::new();
        let v = barlow_twins_var(tape.param(z1.clone()), &z2, 0.3).unwrap();
        assert!((v.item() - got).abs() < 1e-12);
        assert!(barlow_twins(&random_matrix(1, 4, 0), &random_matrix(1, 4, 1), 0.1).is_err());
    }

    #[test]
    fn barlow_perfect_case_is_zero() {
        // Columns ±1 patterns that are mutually orthogonal with zero mean.
        let z = Matrix::from_rows(&[
            [1.0, 1.0, 1.0],
            [1.0, -1.0, -1.0],
            [-1.0, 1.0, -1.0],
            [-1.0, -1.0, 1.0],
        ]);
        assert!(barlow_twins(&z, &z, 0.7).unwrap().abs() < 1e-15);
    }

    #[test]
    fn barlow_expansion_identities() {
        let z1 = random_matrix(12, 5, 19);
        let z2 = random_matrix(12, 5, 20);
        let exp = barlow_expanded(&z1, &z2, 0.4).unwrap();
        let sub = barlow_substituted(&z1, &z2, 0.4).unwrap();
        assert!((exp - sub).abs() < 1e-12);
        let same = [
            barlow_twins(&z1, &z1, 0.4).unwrap(),
            barlow_substituted(&z1, &z1, 0.4).unwrap(),
            barlow_expanded(&z1, &z1, 0.4).unwrap(),
        ];
        assert!((same[0] - same[1]).abs() < 1e-12 && (same[0] - same[2]).abs() < 1e-12);
    }

    #[test]
    fn taped_losses_match_values() {
        let z1 = random_unit_rows(6, 4, 21);
        let z2 = random_unit_rows(6, 4, 22);
        let tape = Tape::new();
        let v = squared_contrastive_batch_var(tape.param(z1.clone()), &z2, 2.5).unwrap();
        assert!((v.item() - squared_contrastive_batch(&z1, &z2, 2.5).unwrap()).abs() < 1e-12);
        let v = infonce_var(tape.param(z1.clone()), &z2, 0.3).unwrap();
        assert!((v.item() - infonce(&z1, &z2, 0.3).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn tico_gradient_matches_finite_differences() {
        let z1 = random_unit_rows(6, 4, 23);
        let z2 = random_unit_rows(6, 4, 24);
        let c = random_unit_rows(30, 4, 25).covariance().unwrap();
        check(&[z1], |_, v| tico_loss_var(v[0], &z2, &c, 8.0)).unwrap();
    }

    #[test]
    fn loss_kind_parses() {
        for k in LossKind::ALL {
            assert_eq!(k.as_str().parse::<LossKind>().unwrap(), k);
        }
        assert!("vicreg".parse::<LossKind>().is_err());
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig { tau: 0.0, ..LossConfig::default() };
        assert!(bad.validate().is_err());
    }
}
