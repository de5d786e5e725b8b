//! Linear probing of frozen representations and collapse diagnostics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, EIG_TOL};
use crate::model::{represent, ArchitectureConfig, Parameters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Nesterov momentum coefficient.
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 0.1,
            momentum: 0.9,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("probe lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("probe epochs and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("probe momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Encoder outputs (before the projector) for every sample, with labels.
pub fn extract_representations(
    arch: &ArchitectureConfig,
    params: &Parameters,
    dataset: &Dataset,
) -> Result<(Matrix, Vec<usize>)> {
    Ok((represent(arch, params, &dataset.features())?, dataset.labels()))
}

/// `(Σλ)² / Σλ²` of a symmetric PSD matrix; zero for the zero matrix.
pub fn effective_rank(c: &Matrix) -> Result<f64> {
    let eig = c.sym_eig(EIG_TOL)?;
    Ok(effective_rank_of_spectrum(&eig.eigenvalues))
}

pub fn effective_rank_of_spectrum(eigenvalues: &[f64]) -> f64 {
    // Jacobi leaves round-off sized negatives around zero.
    let clipped: Vec<f64> = eigenvalues.iter().map(|v| v.max(0.0)).collect();
    let sum: f64 = clipped.iter().sum();
    let sum_sq: f64 = clipped.iter().map(|v| v * v).sum();
    if sum_sq == 0.0 {
        0.0
    } else {
        sum * sum / sum_sq
    }
}

/// Deterministic 80/20 train/test split of `0..n`.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (n * 4) / 5;
    let test = idx.split_off(cut);
    (idx, test)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Multinomial logistic regression trained by mini-batch SGD with Nesterov
/// momentum on the training split; returns held-out accuracy.
///
/// Features are standardized with training-split statistics first.
pub fn linear_probe(reprs: &Matrix, labels: &[usize], cfg: &ProbeConfig) -> Result<f64> {
    cfg.validate()?;
    if reprs.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "linear_probe",
            left: reprs.shape(),
            right: (labels.len(), 1),
        });
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Config("linear probe needs at least two classes".into()));
    }

    let (train, test) = split_indices(reprs.rows(), cfg.seed);
    if train.is_empty() || test.is_empty() {
        return Err(Error::TooFewRows {
            op: "linear_probe",
            min: 5,
            got: reprs.rows(),
        });
    }
    let dim = reprs.cols();

    let mut mean = vec![0.0; dim];
    let mut std = vec![0.0; dim];
    for &i in &train {
        for (m, v) in mean.iter_mut().zip(reprs.row(i)) {
            *m += v / train.len() as f64;
        }
    }
    for &i in &train {
        for ((s, m), v) in std.iter_mut().zip(&mean).zip(reprs.row(i)) {
            *s += (v - m).powi(2) / train.len() as f64;
        }
    }
    std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-8));
    let features = |i: usize| -> Vec<f64> {
        reprs
            .row(i)
            .iter()
            .zip(&mean)
            .zip(&std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    };

    // Weights hold one extra row for the bias.
    let mut w = Matrix::zeros(dim + 1, num_classes);
    let mut vel = Matrix::zeros(dim + 1, num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let mut order = train.clone();
    let mut logits = vec![0.0; num_classes];

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = Matrix::zeros(dim + 1, num_classes);
            for &i in batch {
                let mut x = features(i);
                x.push(1.0);
                logits.iter_mut().for_each(|l| *l = 0.0);
                for (k, xv) in x.iter().enumerate() {
                    for (l, wv) in logits.iter_mut().zip(w.row(k)) {
                        *l += xv * wv;
                    }
                }
                softmax_in_place(&mut logits);
                logits[labels[i]] -= 1.0;
                for (k, xv) in x.iter().enumerate() {
                    for (g, p) in grad.row_mut(k).iter_mut().zip(&logits) {
                        *g += xv * p / batch.len() as f64;
                    }
                }
            }
            for ((wv, vv), gv) in w
                .as_mut_slice()
                .iter_mut()
                .zip(vel.as_mut_slice())
                .zip(grad.as_slice())
            {
                *vv = cfg.momentum * *vv + gv;
                *wv -= cfg.lr * (gv + cfg.momentum * *vv);
            }
        }
    }

    let correct = test
        .iter()
        .filter(|&&i| {
            let mut x = features(i);
            x.push(1.0);
            let mut best = (0, f64::NEG_INFINITY);
            for c in 0..num_classes {
                let score: f64 = (0..=dim).map(|k| x[k] * w[(k, c)]).sum();
                if score > best.1 {
                    best = (c, score);
                }
            }
            best.0 == labels[i]
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{random_matrix, random_unit_rows};

    #[test]
    fn effective_rank_cases() {
        assert!((effective_rank(&Matrix::identity(7)).unwrap() - 7.0).abs() < 1e-12);
        let u = random_unit_rows(1, 5, 1);
        assert!((effective_rank(&u.t_matmul(&u).unwrap()).unwrap() - 1.0).abs() < 1e-10);
        let r = effective_rank(&Matrix::diag(&[2.0, 1.0, 1.0])).unwrap();
        assert!((r - 16.0 / 6.0).abs() < 1e-12);
        assert_eq!(effective_rank(&Matrix::zeros(4, 4)).unwrap(), 0.0);
        assert!(effective_rank(&random_matrix(3, 3, 2)).is_err());
    }

    #[test]
    fn effective_rank_scale_invariant() {
        let c = random_unit_rows(20, 6, 3).covariance().unwrap();
        let r = effective_rank(&c).unwrap();
        for s in [1e-3, 0.5, 40.0] {
            assert!((effective_rank(&c.scale(s)).unwrap() - r).abs() < 1e-10);
        }
        assert!(r > 0.0 && r <= 6.0);
    }

    #[test]
    fn one_hot_is_perfectly_probed() {
        let labels: Vec<usize> = (0..200).map(|i| i % 4).collect();
        let mut x = Matrix::zeros(200, 4);
        for (i, &l) in labels.iter().enumerate() {
            x[(i, l)] = 1.0;
        }
        assert_eq!(linear_probe(&x, &labels, &ProbeConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn single_class_rejected() {
        let x = random_matrix(20, 3, 4);
        assert!(linear_probe(&x, &[2; 20], &ProbeConfig::default()).is_err());
    }

    #[test]
    fn split_is_deterministic_partition() {
        let (a, b) = split_indices(103, 5);
        assert_eq!((a.len(), b.len()), (82, 21));
        assert_eq!(split_indices(103, 5), (a.clone(), b.clone()));
        let mut all: Vec<usize> = a.into_iter().chain(b).collect();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
    }

    #[test]
    fn probe_is_deterministic() {
        let x = random_matrix(120, 5, 6);
        let labels: Vec<usize> = (0..120).map(|i| i % 3).collect();
        let cfg = ProbeConfig::default();
        assert_eq!(
            linear_probe(&x, &labels, &cfg).unwrap(),
            linear_probe(&x, &labels, &cfg).unwrap()
        );
    }
}
