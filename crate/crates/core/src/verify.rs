//! Executable checks of the algebra behind the loss.
//!
//! Embeddings are stored as rows, so a batch `Z` is `n×d`, the covariance is
//! `ZᵀZ` (d×d) and the Gram matrix is `ZZᵀ` (n×n). Column-major write-ups of
//! the same identities swap the two products.
//!
//! Every check is a pure function of its arguments and returns one or more
//! [`VerificationReport`]s.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::ema::{CovarianceState, MomentumState};
use crate::error::{Error, Result};
use crate::gradcheck::{max_relative_error, random_matrix, random_unit_rows, FD_STEP, FD_TOL};
use crate::linalg::{Matrix, EIG_TOL, NORMALIZE_EPS};
use crate::losses::{self, LossConfig, LossKind};
use crate::model::{ArchitectureConfig, Parameters};

/// Relative threshold below which an eigenvalue counts as zero.
pub const NONZERO_REL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub check: String,
    pub inputs: String,
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl VerificationReport {
    pub fn new(check: impl Into<String>, inputs: impl Into<String>, residual: f64, tolerance: f64) -> Self {
        Self {
            check: check.into(),
            inputs: inputs.into(),
            residual,
            tolerance,
            // NaN residuals fail.
            pass: residual <= tolerance,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report fields always serialize")
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {} ({}): residual {:.3e} / tol {:.1e}",
            if self.pass { "pass" } else { "FAIL" },
            self.check,
            self.inputs,
            self.residual,
            self.tolerance
        )
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn check_range(op: &str, name: &str, v: usize, lo: usize, hi: usize) -> Result<()> {
    if v < lo || v > hi {
        return Err(Error::Config(format!("{op}: {name} must lie in [{lo}, {hi}], got {v}")));
    }
    Ok(())
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut *rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized buffer")
}

/// Gram and covariance products share their nonzero spectrum, hence their
/// trace and Frobenius norm. Returns one report per statement.
pub fn check_gram_duality(n: usize, d: usize, seed: u64) -> Result<[VerificationReport; 3]> {
    check_range("check_gram_duality", "n", n, 2, 64)?;
    check_range("check_gram_duality", "d", d, 2, 64)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = gaussian_matrix(n, d, &mut rng);
    let mut gram = z.matmul_t(&z)?;
    gram.mirror_upper();
    let mut cov = z.t_matmul(&z)?;
    cov.mirror_upper();
    let eg = gram.sym_eig(EIG_TOL)?;
    let ec = cov.sym_eig(EIG_TOL)?;
    let (nz_g, nz_c) = (eg.nonzero(NONZERO_REL), ec.nonzero(NONZERO_REL));
    let top = ec.eigenvalues[0].abs().max(eg.eigenvalues[0].abs()).max(1.0);
    let inputs = format!("n={n} d={d} seed={seed} nonzero={}|{}", nz_g.len(), nz_c.len());

    let spectrum = if nz_g.len() != nz_c.len() {
        f64::INFINITY
    } else {
        nz_g.iter()
            .zip(&nz_c)
            .map(|(a, b)| (a - b).abs() / top)
            .fold(0.0, f64::max)
    };
    let sum: f64 = nz_c.iter().sum();
    let sum_sq: f64 = nz_c.iter().map(|v| v * v).sum();
    let trace = rel(gram.trace(), sum).max(rel(cov.trace(), sum));
    let frob = rel(gram.frobenius_norm_sq(), sum_sq).max(rel(cov.frobenius_norm_sq(), sum_sq));

    Ok([
        VerificationReport::new("gram_duality.shared_spectrum", inputs.clone(), spectrum, 1e-8),
        VerificationReport::new("gram_duality.trace", inputs.clone(), trace, 1e-10),
        VerificationReport::new("gram_duality.frobenius", inputs, frob, 1e-8),
    ])
}

/// The squared contrastive loss against a bank of `m` negatives equals the
/// covariance form with the bank's covariance.
pub fn check_membank_equivalence(n: usize, m: usize, d: usize, rho: f64, seed: u64) -> Result<VerificationReport> {
    let z1 = random_unit_rows(n, d, seed);
    let pos = random_unit_rows(n, d, seed.wrapping_add(1));
    let bank = random_unit_rows(m, d, seed.wrapping_add(2));
    let direct = losses::squared_contrastive_membank(&z1, &bank, &pos, rho)?;
    let rewritten = losses::covariance_form(&z1, &pos, &bank.covariance()?, rho)?;
    Ok(VerificationReport::new(
        "membank_equivalence",
        format!("n={n} m={m} d={d} rho={rho} seed={seed}"),
        rel(direct, rewritten),
        1e-12,
    ))
}

/// Unit rows repeated so every covariance eigenvalue equals `n/d`.
///
/// The rows of a random orthogonal `d×d` matrix are tiled `k` times, giving
/// `n = k·d` rows.
pub fn balanced_minimizer(k: usize, d: usize, seed: u64) -> Result<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = gaussian_matrix(d, d, &mut rng);
    // Modified Gram-Schmidt over the rows.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    for i in 0..d {
        let mut v = q.row(i).to_vec();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            return Err(Error::Config("degenerate draw for the orthonormal basis".into()));
        }
        basis.push(v.into_iter().map(|x| x / norm).collect());
    }
    let rows: Vec<Vec<f64>> = (0..k).flat_map(|_| basis.iter().cloned()).collect();
    Ok(Matrix::from_rows(&rows))
}

/// `‖ZᵀZ‖²_F ≥ n²/d` for unit-row `Z`, with equality for a balanced spectrum.
///
/// The residual is the larger of the worst shortfall below the bound over
/// `trials` random draws and the gap of the constructed minimizer, which has
/// `max(1, n/d)·d` rows.
pub fn check_lower_bound(n: usize, d: usize, seed: u64, trials: usize) -> Result<VerificationReport> {
    if n == 0 || d == 0 {
        return Err(Error::Config("check_lower_bound needs n, d > 0".into()));
    }
    let bound = (n * n) as f64 / d as f64;
    let mut worst_shortfall: f64 = 0.0;
    let mut min_ratio = f64::INFINITY;
    for t in 0..trials {
        let z = random_unit_rows(n, d, seed.wrapping_add(t as u64));
        let value = z.t_matmul(&z)?.frobenius_norm_sq();
        worst_shortfall = worst_shortfall.max(bound - value);
        min_ratio = min_ratio.min(value / bound);
    }
    let k = (n / d).max(1);
    let z = balanced_minimizer(k, d, seed)?;
    let nc = k * d;
    let gap = (z.t_matmul(&z)?.frobenius_norm_sq() - (nc * nc) as f64 / d as f64).abs();
    Ok(VerificationReport::new(
        "lower_bound",
        format!("n={n} d={d} seed={seed} trials={trials} min_ratio={min_ratio:.6} minimizer_rows={nc}"),
        worst_shortfall.max(0.0).max(gap),
        1e-10,
    ))
}

/// The expanded Barlow Twins expression equals the substituted loss on random
/// inputs, and all three forms agree when both views coincide.
pub fn check_barlow_identity(n: usize, d: usize, lambda: f64, seed: u64) -> Result<VerificationReport> {
    let a = random_matrix(n, d, seed);
    let b = random_matrix(n, d, seed.wrapping_add(1));
    let mut residual = rel(
        losses::barlow_expanded(&a, &b, lambda)?,
        losses::barlow_substituted(&a, &b, lambda)?,
    );
    let full = losses::barlow_twins(&a, &a, lambda)?;
    residual = residual
        .max(rel(losses::barlow_expanded(&a, &a, lambda)?, full))
        .max(rel(losses::barlow_substituted(&a, &a, lambda)?, full));
    Ok(VerificationReport::new(
        "barlow_identity",
        format!("n={n} d={d} lambda={lambda} seed={seed}"),
        residual,
        1e-12,
    ))
}

/// The running covariance after `steps` updates equals
/// `Σⱼ (1−β) β^{steps−j} Bⱼ`.
pub fn check_ema_equivalence(steps: usize, n: usize, d: usize, beta: f64, seed: u64) -> Result<VerificationReport> {
    let mut state = CovarianceState::new(d, beta)?;
    let batches: Vec<Matrix> = (0..steps)
        .map(|j| random_unit_rows(n, d, seed.wrapping_add(j as u64)).covariance())
        .collect::<Result<_>>()?;
    for (j, _) in batches.iter().enumerate() {
        state.update(&random_unit_rows(n, d, seed.wrapping_add(j as u64)))?;
    }
    let mut closed = Matrix::zeros(d, d);
    for (j, b) in batches.iter().enumerate() {
        let w = (1.0 - beta) * beta.powi((steps - 1 - j) as i32);
        closed.axpy(w, b)?;
    }
    Ok(VerificationReport::new(
        "ema_covariance",
        format!("steps={steps} n={n} d={d} beta={beta} seed={seed}"),
        state.c.max_abs_diff(&closed),
        1e-12,
    ))
}

/// Momentum parameters after `steps` updates equal
/// `α^T ξ₀ + Σⱼ (1−α) α^{T−j} θⱼ`.
pub fn check_momentum_equivalence(steps: usize, alpha: f64, seed: u64) -> Result<VerificationReport> {
    let arch = ArchitectureConfig {
        input_dim: 6,
        encoder_hidden_dims: vec![5],
        repr_dim: 4,
        projector_hidden_dim: 5,
        embed_dim: 3,
    };
    let xi0 = Parameters::init(&arch, seed)?;
    let thetas: Vec<Parameters> = (1..=steps)
        .map(|j| Parameters::init(&arch, seed.wrapping_add(j as u64)))
        .collect::<Result<_>>()?;
    let mut state = MomentumState::new(alpha, xi0.clone())?;
    for theta in &thetas {
        state.update(theta)?;
    }
    let t = steps as i32;
    let mut closed: Vec<f64> = xi0.flatten().iter().map(|v| alpha.powi(t) * v).collect();
    for (j, theta) in thetas.iter().enumerate() {
        let w = (1.0 - alpha) * alpha.powi(t - 1 - j as i32);
        closed.iter_mut().zip(theta.flatten()).for_each(|(c, v)| *c += w * v);
    }
    let residual = state
        .xi
        .flatten()
        .iter()
        .zip(&closed)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(VerificationReport::new(
        "ema_momentum",
        format!("steps={steps} alpha={alpha} seed={seed}"),
        residual,
        1e-12,
    ))
}

/// Analytic gradient of a loss with respect to the online embeddings against
/// central differences.
pub fn check_gradients(loss_kind: LossKind, n: usize, d: usize, seed: u64) -> Result<VerificationReport> {
    let cfg = LossConfig::default();
    let residual = match loss_kind {
        LossKind::Tico => {
            let z2 = random_unit_rows(n, d, seed.wrapping_add(1));
            let c = random_unit_rows(3 * n, d, seed.wrapping_add(2)).covariance()?;
            max_relative_error(&[random_unit_rows(n, d, seed)], FD_STEP, |_, v| {
                losses::tico_loss_var(v[0], &z2, &c, cfg.rho)
            })?
        }
        LossKind::Squared => {
            let z2 = random_unit_rows(n, d, seed.wrapping_add(1));
            max_relative_error(&[random_unit_rows(n, d, seed)], FD_STEP, |_, v| {
                losses::squared_contrastive_batch_var(v[0], &z2, cfg.rho)
            })?
        }
        LossKind::Infonce => {
            let z2 = random_unit_rows(n, d, seed.wrapping_add(1));
            max_relative_error(&[random_unit_rows(n, d, seed)], FD_STEP, |_, v| {
                losses::infonce_var(v[0], &z2, cfg.tau)
            })?
        }
        LossKind::Barlow => {
            let z2 = random_matrix(n, d, seed.wrapping_add(1));
            max_relative_error(&[random_matrix(n, d, seed)], FD_STEP, |_, v| {
                losses::barlow_twins_var(v[0], &z2, cfg.barlow_lambda)
            })?
        }
    };
    Ok(VerificationReport::new(
        format!("gradients.{}", loss_kind.as_str()),
        format!("n={n} d={d} seed={seed}"),
        residual,
        FD_TOL,
    ))
}

/// Every differentiable tape operation, in the order they are checked.
pub const OP_KINDS: [&str; 15] = [
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "add_row",
    "relu",
    "normalize_rows",
    "batchnorm",
    "sum",
    "mean",
    "rowwise_dot",
    "quad_form_sum",
    "row_logsumexp",
];

/// Finite-difference check of one tape operation on an `n×d` input.
///
/// Matrix-valued outputs are reduced with a fixed random weighting so that
/// every output entry contributes a distinct gradient.
pub fn check_op_gradient(op: &str, n: usize, d: usize, seed: u64) -> Result<VerificationReport> {
    let x = random_matrix(n, d, seed);
    let y = random_matrix(n, d, seed.wrapping_add(1));
    let w = random_matrix(d, n.max(2), seed.wrapping_add(2));
    let row = random_matrix(1, d, seed.wrapping_add(3));
    let c = random_unit_rows(2 * d, d, seed.wrapping_add(4)).covariance()?;

    fn reduce<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
        let (r, c) = out.shape();
        let weights = out.tape().constant(random_matrix(r, c, seed));
        Ok(out.mul(&weights)?.sum())
    }
    let s = seed.wrapping_add(5);

    let residual = match op {
        "matmul" => max_relative_error(&[x, w], FD_STEP, |_, v| reduce(v[0].matmul(&v[1])?, s))?,
        "transpose" => max_relative_error(&[x], FD_STEP, |_, v| reduce(v[0].transpose(), s))?,
        "add" => max_relative_error(&[x, y], FD_STEP, |_, v| reduce(v[0].add(&v[1])?, s))?,
        "sub" => max_relative_error(&[x, y], FD_STEP, |_, v| reduce(v[0].sub(&v[1])?, s))?,
        "mul" => max_relative_error(&[x, y], FD_STEP, |_, v| reduce(v[0].mul(&v[1])?, s))?,
        "scale" => max_relative_error(&[x], FD_STEP, |_, v| reduce(v[0].scale(-1.7), s))?,
        "add_row" => max_relative_error(&[x, row], FD_STEP, |_, v| reduce(v[0].add_row(&v[1])?, s))?,
        "relu" => max_relative_error(&[x], FD_STEP, |_, v| reduce(v[0].relu(), s))?,
        "normalize_rows" => {
            max_relative_error(&[x], FD_STEP, |_, v| reduce(v[0].normalize_rows(NORMALIZE_EPS), s))?
        }
        "batchnorm" => {
            if n < 2 {
                return Err(Error::TooFewRows {
                    op: "check_op_gradient(batchnorm)",
                    min: 2,
                    got: n,
                });
            }
            let gamma = random_matrix(1, d, seed.wrapping_add(6));
            let shift = random_matrix(1, d, seed.wrapping_add(7));
            max_relative_error(&[x, gamma, shift], FD_STEP, |_, v| {
                reduce(v[0].batchnorm(&v[1], &v[2], 1e-5)?, s)
            })?
        }
        "sum" => max_relative_error(&[x], FD_STEP, |_, v| Ok(v[0].mul(&v[0])?.sum()))?,
        "mean" => max_relative_error(&[x], FD_STEP, |_, v| Ok(v[0].mul(&v[0])?.mean()))?,
        "rowwise_dot" => max_relative_error(&[x, y], FD_STEP, |_, v| reduce(v[0].rowwise_dot(&v[1])?, s))?,
        "quad_form_sum" => max_relative_error(&[x], FD_STEP, |_, v| v[0].quad_form_sum(&c))?,
        "row_logsumexp" => max_relative_error(&[x], FD_STEP, |_, v| reduce(v[0].scale(3.0).row_logsumexp(), s))?,
        other => return Err(Error::Config(format!("unknown op kind `{other}`"))),
    };
    Ok(VerificationReport::new(
        format!("op_gradient.{op}"),
        format!("n={n} d={d} seed={seed}"),
        residual,
        FD_TOL,
    ))
}

/// The three sides of the Frobenius rewrite of the squared in-batch loss,
/// each evaluated independently.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrobeniusTerms {
    /// `−(1/n) Σ z′ᵢ·z″ᵢ + (ρ/n²) Σᵢ Σ_{j≠i} (z′ᵢ·z′ⱼ)²` by explicit loops.
    pub brute_force: f64,
    /// `−(1/n) Tr(Z′ᵀZ″) − ρ/n + (ρ/n²) ‖Z′ᵀZ′‖²_F`.
    pub reconciled: f64,
    /// The same sum weighted `ρ/n` instead of `ρ/n²`, by loops.
    pub brute_force_rho_over_n: f64,
    /// `−(1/n) Tr(Z′ᵀZ″) − ρ + (ρ/n) ‖Z′ᵀZ′‖²_F`.
    pub rewritten_rho_over_n: f64,
}

pub fn frobenius_terms(z1: &Matrix, z2: &Matrix, rho: f64) -> Result<FrobeniusTerms> {
    let n = z1.rows();
    let nf = n as f64;
    let mut align = 0.0;
    let mut off = 0.0;
    for i in 0..n {
        align += z1.row(i).iter().zip(z2.row(i)).map(|(a, b)| a * b).sum::<f64>();
        for j in 0..n {
            if i != j {
                let s: f64 = z1.row(i).iter().zip(z1.row(j)).map(|(a, b)| a * b).sum();
                off += s * s;
            }
        }
    }
    // With unit rows, Σ_{j≠i} (z′ᵢ·z′ⱼ)² = ‖Z′Z′ᵀ‖²_F − n = ‖Z′ᵀZ′‖²_F − n.
    let c_sq = z1.t_matmul(z1)?.frobenius_norm_sq();
    let trace = z1.t_matmul(z2)?.trace();
    Ok(FrobeniusTerms {
        brute_force: -align / nf + rho * off / (nf * nf),
        reconciled: -trace / nf - rho / nf + rho * c_sq / (nf * nf),
        brute_force_rho_over_n: -align / nf + rho * off / nf,
        rewritten_rho_over_n: -trace / nf - rho + rho * c_sq / nf,
    })
}

/// The squared in-batch loss, with the negatives drawn from the first view,
/// equals a trace term, a constant and the squared Frobenius norm of the
/// unnormalized covariance.
///
/// Under the `ρ/n²` weight of the loss the constant is `−ρ/n`; under a `ρ/n`
/// weight it is `−ρ`. Both pairings are asserted. With identical views the
/// loss function itself is compared too.
pub fn check_frobenius_rewrite(n: usize, d: usize, rho: f64, seed: u64) -> Result<VerificationReport> {
    let z1 = random_unit_rows(n, d, seed);
    let z2 = random_unit_rows(n, d, seed.wrapping_add(1));
    let t = frobenius_terms(&z1, &z2, rho)?;
    let same = frobenius_terms(&z1, &z1, rho)?;
    let library = losses::squared_contrastive_batch(&z1, &z1, rho)?;
    let residual = rel(t.brute_force, t.reconciled)
        .max(rel(t.brute_force_rho_over_n, t.rewritten_rho_over_n))
        .max(rel(library, same.reconciled));
    Ok(VerificationReport::new(
        "frobenius_rewrite",
        format!(
            "n={n} d={d} rho={rho} seed={seed} constants: weight rho/n^2 -> -rho/n, weight rho/n -> -rho"
        ),
        residual,
        1e-10,
    ))
}

/// Runs every check at each `(n, d)` size.
pub fn run_suite(seed: u64, sizes: &[(usize, usize)]) -> Result<Vec<VerificationReport>> {
    let cfg = LossConfig::default();
    let mut out = Vec::new();
    for (k, &(n, d)) in sizes.iter().enumerate() {
        let s = seed.wrapping_add(1000 * k as u64);
        out.extend(check_gram_duality(n, d, s)?);
        out.push(check_membank_equivalence(n, 2 * n, d, cfg.rho, s)?);
        out.push(check_lower_bound(n, d, s, 100)?);
        out.push(check_barlow_identity(n, d, cfg.barlow_lambda, s)?);
        out.push(check_ema_equivalence(10, n, d, 0.9, s)?);
        out.push(check_frobenius_rewrite(n, d, cfg.rho, s)?);
        for kind in LossKind::ALL {
            out.push(check_gradients(kind, n, d, s)?);
        }
        for op in OP_KINDS {
            out.push(check_op_gradient(op, n, d, s)?);
        }
    }
    out.push(check_momentum_equivalence(10, 0.99, seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_pass_flag_follows_residual() {
        assert!(VerificationReport::new("x", "", 1e-13, 1e-12).pass);
        assert!(!VerificationReport::new("x", "", 2e-12, 1e-12).pass);
        assert!(!VerificationReport::new("x", "", f64::NAN, 1e-12).pass);
        let line = VerificationReport::new("x", "n=2", 0.0, 1.0).to_json_line();
        assert_eq!(line, r#"{"check":"x","inputs":"n=2","residual":0.0,"tolerance":1.0,"pass":true}"#);
    }

    #[test]
    fn gram_duality_trivial_shapes() {
        for r in check_gram_duality(7, 5, 3).unwrap() {
            assert!(r.pass, "{r}");
        }
        assert!(check_gram_duality(1, 5, 0).is_err());
        assert!(check_gram_duality(5, 65, 0).is_err());
    }

    #[test]
    fn minimizer_has_flat_spectrum() {
        let z = balanced_minimizer(3, 4, 9).unwrap();
        assert_eq!(z.shape(), (12, 4));
        let c = z.t_matmul(&z).unwrap();
        assert!(c.max_abs_diff(&Matrix::identity(4).scale(3.0)) < 1e-12);
    }

    #[test]
    fn frobenius_terms_separate_the_prefactors() {
        let z1 = random_unit_rows(6, 4, 1);
        let z2 = random_unit_rows(6, 4, 2);
        let t = frobenius_terms(&z1, &z2, 8.0).unwrap();
        assert!(rel(t.brute_force, t.reconciled) < 1e-12);
        assert!(rel(t.brute_force_rho_over_n, t.rewritten_rho_over_n) < 1e-12);
        // Pairing the ρ/n weight with the −ρ/n constant is wrong.
        let mixed = t.rewritten_rho_over_n + 8.0 - 8.0 / 6.0;
        assert!(rel(t.brute_force_rho_over_n, mixed) > 1e-3);
    }

    #[test]
    fn unknown_op_is_config_error() {
        assert!(matches!(check_op_gradient("conv", 3, 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn small_suite_passes() {
        let reports = run_suite(5, &[(4, 3)]).unwrap();
        assert_eq!(reports.len(), 3 + 5 + LossKind::ALL.len() + OP_KINDS.len() + 1);
        for r in &reports {
            assert!(r.pass, "{r}");
        }
    }
}
