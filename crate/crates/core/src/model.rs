//! MLP encoder and projector, plus the online/momentum parameter pair.
//!
//! The encoder is a stack of linear layers with ReLU between hidden layers and
//! no activation after the last one; its output is the representation used
//! for linear probing. The projector is `linear → batchnorm → ReLU → linear`,
//! followed by row-wise L2 normalization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, NORMALIZE_EPS};

/// Variance guard inside the projector's batchnorm.
pub const BATCHNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub input_dim: usize,
    pub encoder_hidden_dims: Vec<usize>,
    pub repr_dim: usize,
    pub projector_hidden_dim: usize,
    pub embed_dim: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            input_dim: 64,
            encoder_hidden_dims: vec![256, 128],
            repr_dim: 64,
            projector_hidden_dim: 128,
            embed_dim: 32,
        }
    }
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.input_dim, self.repr_dim, self.projector_hidden_dim];
        if dims.contains(&0) || self.encoder_hidden_dims.contains(&0) {
            return Err(Error::Config("all layer widths must be at least 1".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config(format!(
                "embed_dim must be at least 2, got {}",
                self.embed_dim
            )));
        }
        Ok(())
    }

    /// `(name, rows, cols)` for every parameter slice, in a fixed order.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut widths = vec![self.input_dim];
        widths.extend(&self.encoder_hidden_dims);
        widths.push(self.repr_dim);
        for (i, w) in widths.windows(2).enumerate() {
            out.push((format!("encoder.{i}.weight"), w[0], w[1]));
            out.push((format!("encoder.{i}.bias"), 1, w[1]));
        }
        let (r, h, d) = (self.repr_dim, self.projector_hidden_dim, self.embed_dim);
        out.push(("projector.0.weight".into(), r, h));
        out.push(("projector.0.bias".into(), 1, h));
        out.push(("projector.bn.gamma".into(), 1, h));
        out.push(("projector.bn.shift".into(), 1, h));
        out.push(("projector.1.weight".into(), h, d));
        out.push(("projector.1.bias".into(), 1, d));
        out
    }

    fn encoder_layers(&self) -> usize {
        self.encoder_hidden_dims.len() + 1
    }
}

/// A named tensor slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    pub name: String,
    pub value: Matrix,
}

impl Slice {
    /// Biases and batchnorm affine parameters.
    pub fn is_bias_or_norm(&self) -> bool {
        self.name.ends_with(".bias") || self.name.contains(".bn.")
    }
}

/// Named parameter slices in layout order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub slices: Vec<Slice>,
}

impl Parameters {
    pub fn zeros_like(arch: &ArchitectureConfig) -> Self {
        Self {
            slices: arch
                .layout()
                .into_iter()
                .map(|(name, r, c)| Slice {
                    name,
                    value: Matrix::zeros(r, c),
                })
                .collect(),
        }
    }

    /// He-normal weights, zero biases, unit batchnorm scale, zero shift.
    pub fn init(arch: &ArchitectureConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros_like(arch);
        for slice in &mut params.slices {
            if slice.name.ends_with(".weight") {
                let fan_in = slice.value.rows() as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                slice
                    .value
                    .as_mut_slice()
                    .iter_mut()
                    .for_each(|v| *v = normal.sample(&mut rng));
            } else if slice.name.ends_with(".gamma") {
                slice.value = Matrix::filled(1, slice.value.cols(), 1.0);
            }
        }
        Ok(params)
    }

    pub fn num_values(&self) -> usize {
        self.slices.iter().map(|s| s.value.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for s in &self.slices {
            out.extend_from_slice(s.value.as_slice());
        }
        out
    }

    /// Overwrites every slice from a flat vector in layout order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(Error::Layout(format!(
                "flat vector has {} values, parameters hold {}",
                flat.len(),
                self.num_values()
            )));
        }
        let mut offset = 0;
        for s in &mut self.slices {
            let len = s.value.len();
            s.value.as_mut_slice().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.slices.iter().find(|s| s.name == name).map(|s| &s.value)
    }

    /// Errors unless both sets have the same names and shapes in the same order.
    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.slices.len() != other.slices.len() {
            return Err(Error::Layout(format!(
                "{} slices vs {}",
                self.slices.len(),
                other.slices.len()
            )));
        }
        for (a, b) in self.slices.iter().zip(&other.slices) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Layout(format!(
                    "slice `{}` {:?} vs `{}` {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn matches_arch(&self, arch: &ArchitectureConfig) -> Result<()> {
        self.check_compatible(&Self::zeros_like(arch))
    }

    /// Registers every slice on `tape`, as parameters or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .slices
            .iter()
            .map(|s| {
                if trainable {
                    tape.param(s.value.clone())
                } else {
                    tape.constant(s.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters registered on a tape, in layout order.
#[derive(Debug, Clone)]
pub struct Bound<'t> {
    pub vars: Vec<Var<'t>>,
}

/// Encoder output (the representation), `n x repr_dim`.
pub fn forward<'t>(arch: &ArchitectureConfig, params: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
    if x.shape().1 != arch.input_dim {
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: x.shape(),
            right: (x.shape().0, arch.input_dim),
        });
    }
    let layers = arch.encoder_layers();
    let mut h = x;
    for i in 0..layers {
        let w = &params.vars[2 * i];
        let b = &params.vars[2 * i + 1];
        h = h.matmul(w)?.add_row(b)?;
        if i + 1 < layers {
            h = h.relu();
        }
    }
    Ok(h)
}

/// Projector output before row normalization, `n x embed_dim`.
pub fn project<'t>(arch: &ArchitectureConfig, params: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
    if x.shape().0 < 2 {
        return Err(Error::TooFewRows {
            op: "embed (batchnorm needs batch statistics)",
            min: 2,
            got: x.shape().0,
        });
    }
    let repr = forward(arch, params, x)?;
    let p = &params.vars[2 * arch.encoder_layers()..];
    let h = repr
        .matmul(&p[0])?
        .add_row(&p[1])?
        .batchnorm(&p[2], &p[3], BATCHNORM_EPS)?
        .relu();
    h.matmul(&p[4])?.add_row(&p[5])
}

/// Unit-norm embedding, `n x embed_dim`.
pub fn embed<'t>(arch: &ArchitectureConfig, params: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
    Ok(project(arch, params, x)?.normalize_rows(NORMALIZE_EPS))
}

/// Encoder output as plain values.
pub fn represent(arch: &ArchitectureConfig, params: &Parameters, x: &Matrix) -> Result<Matrix> {
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    Ok(forward(arch, &bound, tape.constant(x.clone()))?.value())
}

/// Unnormalized projector output as plain values.
pub fn project_values(arch: &ArchitectureConfig, params: &Parameters, x: &Matrix) -> Result<Matrix> {
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    Ok(project(arch, &bound, tape.constant(x.clone()))?.value())
}

/// Embeddings as plain values.
pub fn embed_values(arch: &ArchitectureConfig, params: &Parameters, x: &Matrix) -> Result<Matrix> {
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    Ok(embed(arch, &bound, tape.constant(x.clone()))?.value())
}

/// Online parameters θ and momentum parameters ξ sharing one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPair {
    pub online: Parameters,
    pub momentum: Parameters,
    pub arch: ArchitectureConfig,
}

impl EncoderPair {
    /// Fresh online weights; the momentum copy starts equal to them.
    pub fn init(arch: &ArchitectureConfig, seed: u64) -> Result<Self> {
        let online = Parameters::init(arch, seed)?;
        Ok(Self {
            momentum: online.clone(),
            online,
            arch: arch.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_matrix;

    fn small() -> ArchitectureConfig {
        ArchitectureConfig {
            input_dim: 6,
            encoder_hidden_dims: vec![8],
            repr_dim: 5,
            projector_hidden_dim: 7,
            embed_dim: 3,
        }
    }

    #[test]
    fn init_is_deterministic_and_pair_starts_equal() {
        let a = EncoderPair::init(&ArchitectureConfig::default(), 7).unwrap();
        let b = EncoderPair::init(&ArchitectureConfig::default(), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.online, a.momentum);
        let c = EncoderPair::init(&ArchitectureConfig::default(), 8).unwrap();
        assert_ne!(a.online, c.online);
    }

    #[test]
    fn he_init_std() {
        let arch = ArchitectureConfig::default();
        let p = Parameters::init(&arch, 3).unwrap();
        for s in p.slices.iter().filter(|s| s.name.ends_with(".weight")) {
            let fan_in = s.value.rows();
            assert!(fan_in >= 64);
            let n = s.value.len() as f64;
            let mean = s.value.sum() / n;
            let std = (s.value.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let target = (2.0 / fan_in as f64).sqrt();
            assert!((std / target - 1.0).abs() < 0.2, "{}: {std} vs {target}", s.name);
        }
        assert!(p.slices.iter().filter(|s| s.name.ends_with(".bias")).all(|s| s.value.max_abs() == 0.0));
        assert_eq!(p.get("projector.bn.gamma").unwrap(), &Matrix::filled(1, 128, 1.0));
    }

    #[test]
    fn flatten_roundtrip() {
        let p = Parameters::init(&small(), 1).unwrap();
        let flat = p.flatten();
        assert_eq!(flat.len(), p.num_values());
        let mut q = Parameters::zeros_like(&small());
        q.assign_flat(&flat).unwrap();
        assert_eq!(p, q);
        assert!(q.assign_flat(&flat[1..]).is_err());
    }

    #[test]
    fn embed_rows_are_unit_norm() {
        let arch = small();
        let p = Parameters::init(&arch, 2).unwrap();
        let z = embed_values(&arch, &p, &random_matrix(10, 6, 4)).unwrap();
        assert_eq!(z.shape(), (10, 3));
        for n in z.row_norms() {
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn momentum_branch_matches_online_at_init() {
        let arch = small();
        let pair = EncoderPair::init(&arch, 5).unwrap();
        let x = random_matrix(6, 6, 9);
        assert_eq!(
            embed_values(&arch, &pair.online, &x).unwrap(),
            embed_values(&arch, &pair.momentum, &x).unwrap()
        );
    }

    #[test]
    fn single_row_batch_rejected() {
        let arch = small();
        let p = Parameters::init(&arch, 2).unwrap();
        let err = embed_values(&arch, &p, &random_matrix(1, 6, 4)).unwrap_err();
        assert!(matches!(err, Error::TooFewRows { got: 1, .. }));
        // Representations do not need batch statistics.
        assert!(represent(&arch, &p, &random_matrix(1, 6, 4)).is_ok());
    }

    #[test]
    fn input_width_checked() {
        let arch = small();
        let p = Parameters::init(&arch, 2).unwrap();
        assert!(matches!(
            represent(&arch, &p, &random_matrix(3, 5, 4)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn row_permutation_commutes_with_embed() {
        let arch = small();
        let p = Parameters::init(&arch, 2).unwrap();
        let x = random_matrix(8, 6, 4);
        let perm = [3, 0, 7, 1, 6, 2, 5, 4];
        let z = embed_values(&arch, &p, &x).unwrap();
        let zp = embed_values(&arch, &p, &x.select_rows(&perm)).unwrap();
        assert!(zp.max_abs_diff(&z.select_rows(&perm)) < 1e-12);
    }

    #[test]
    fn bad_arch_rejected() {
        let mut arch = small();
        arch.embed_dim = 1;
        assert!(Parameters::init(&arch, 0).is_err());
        arch.embed_dim = 3;
        arch.encoder_hidden_dims = vec![0];
        assert!(Parameters::init(&arch, 0).is_err());
    }
}
