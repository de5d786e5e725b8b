//! Synthetic clustered data and the two stochastic augmentation pipelines.
//!
//! The augmentations are 1-D analogs of the usual image distortions:
//!
//! | image op          | analog here                                  |
//! |-------------------|----------------------------------------------|
//! | random crop       | zero a random contiguous window              |
//! | horizontal flip   | negate a random contiguous span              |
//! | color jitter      | additive gaussian noise                      |
//! | grayscale         | coordinate dropout                           |
//! | gaussian blur     | neighbor averaging with kernel [¼, ½, ¼]     |
//! | solarization      | reflect values above a threshold             |
//!
//! Every augmentation draw is seeded per (run, epoch, sample, view), so the
//! output never depends on iteration order or thread count.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub centroid_scale: f64,
    pub within_class_noise: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            dim: 64,
            samples_per_class: 128,
            centroid_scale: 4.0,
            within_class_noise: 1.0,
            seed: 7,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.dim < 8 {
            return Err(Error::Config("dataset dim must be at least 8".into()));
        }
        if !(self.centroid_scale >= 0.0) || !(self.within_class_noise >= 0.0) {
            return Err(Error::Config("scales must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub dim: usize,
    pub seed: u64,
    /// Class centroids as rows. Empty for imported datasets.
    pub centroids: Matrix,
    pub samples: Vec<Sample>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Centroids uniform on the sphere of radius `centroid_scale`; samples are
/// centroid plus isotropic gaussian noise. Class-major order.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centroid_rows: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| {
            let v = gaussian_vec(&mut rng, cfg.dim);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm * cfg.centroid_scale).collect()
        })
        .collect();
    let centroids = Matrix::from_rows(&centroid_rows);
    let samples = draw_samples(&centroids, cfg.samples_per_class, cfg.within_class_noise, &mut rng);
    Ok(Dataset {
        num_classes: cfg.num_classes,
        dim: cfg.dim,
        seed: cfg.seed,
        centroids,
        samples,
    })
}

/// `per_class` noisy draws around each centroid.
pub fn draw_samples(centroids: &Matrix, per_class: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    let mut samples = Vec::with_capacity(centroids.rows() * per_class);
    for label in 0..centroids.rows() {
        for _ in 0..per_class {
            let x = centroids
                .row(label)
                .iter()
                .map(|c| {
                    let e: f64 = StandardNormal.sample(rng);
                    c + noise * e
                })
                .collect();
            samples.push(Sample { x, label });
        }
    }
    samples
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn features(&self) -> Matrix {
        let rows: Vec<&[f64]> = self.samples.iter().map(|s| s.x.as_slice()).collect();
        if rows.is_empty() {
            return Matrix::zeros(0, self.dim);
        }
        Matrix::from_rows(&rows)
    }

    /// Plain-text export.
    ///
    /// ```text
    /// tico-dataset 1
    /// dim <dim> classes <k> samples <n> seed <seed>
    /// <label> <x0> <x1> ...        (one line per sample)
    /// ```
    ///
    /// Values use Rust's shortest round-trip float formatting, so
    /// [`Dataset::read`] restores them bit for bit. Centroids are not stored.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "tico-dataset 1").unwrap();
        writeln!(
            out,
            "dim {} classes {} samples {} seed {}",
            self.dim,
            self.num_classes,
            self.samples.len(),
            self.seed
        )
        .unwrap();
        for s in &self.samples {
            write!(out, "{}", s.label).unwrap();
            for v in &s.x {
                write!(out, " {v:?}").unwrap();
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(Error::file(path))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::file(path))?;
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            msg,
        };
        let mut lines = text.lines();
        if lines.next() != Some("tico-dataset 1") {
            return Err(bad("missing `tico-dataset 1` header".into()));
        }
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| bad("missing dimension line".into()))?
            .split_whitespace()
            .collect();
        let field = |key: &str| -> Result<u64> {
            let pos = header
                .iter()
                .position(|t| *t == key)
                .ok_or_else(|| bad(format!("header lacks `{key}`")))?;
            header
                .get(pos + 1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("bad value for `{key}`")))
        };
        let dim = field("dim")? as usize;
        let num_classes = field("classes")? as usize;
        let count = field("samples")? as usize;
        let seed = field("seed")?;

        let mut samples = Vec::with_capacity(count);
        for (i, line) in lines.enumerate() {
            let mut toks = line.split_whitespace();
            let label: usize = toks
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad(format!("row {i}: bad label")))?;
            if label >= num_classes {
                return Err(bad(format!("row {i}: label {label} out of range")));
            }
            let x: Vec<f64> = toks
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("row {i}: {e}")))?;
            if x.len() != dim {
                return Err(bad(format!("row {i}: {} values, expected {dim}", x.len())));
            }
            samples.push(Sample { x, label });
        }
        if samples.len() != count {
            return Err(bad(format!("{} rows, header says {count}", samples.len())));
        }
        Ok(Self {
            num_classes,
            dim,
            seed,
            centroids: Matrix::zeros(0, dim),
            samples,
        })
    }
}

/// Index of the nearest row of `centroids` in Euclidean distance.
pub fn nearest_centroid(centroids: &Matrix, x: &[f64]) -> usize {
    (0..centroids.rows())
        .map(|k| {
            let d: f64 = centroids.row(k).iter().zip(x).map(|(c, v)| (c - v).powi(2)).sum();
            (k, d)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub mask_prob: f64,
    /// Window length as a fraction of the dimension, drawn from
    /// `[mask_min_frac, mask_max_frac]`. At most half is ever masked.
    pub mask_min_frac: f64,
    pub mask_max_frac: f64,
    pub flip_prob: f64,
    pub flip_max_frac: f64,
    pub jitter_prob: f64,
    pub jitter_scale: f64,
    pub drop_prob: f64,
    pub drop_rate: f64,
    pub smooth_prob: f64,
    pub reflect_prob: f64,
    pub reflect_threshold: f64,
}

impl AugmentationConfig {
    /// First pipeline: always smoothed, never reflected.
    pub fn view_a() -> Self {
        Self {
            mask_prob: 1.0,
            mask_min_frac: 0.05,
            mask_max_frac: 0.25,
            flip_prob: 0.5,
            flip_max_frac: 0.125,
            jitter_prob: 0.8,
            jitter_scale: 0.4,
            drop_prob: 0.2,
            drop_rate: 0.2,
            smooth_prob: 1.0,
            reflect_prob: 0.0,
            reflect_threshold: 1.0,
        }
    }

    /// Second pipeline: rarely smoothed, sometimes reflected.
    pub fn view_b() -> Self {
        Self {
            smooth_prob: 0.1,
            reflect_prob: 0.2,
            ..Self::view_a()
        }
    }

    /// Identity pipeline.
    pub fn none() -> Self {
        Self {
            mask_prob: 0.0,
            flip_prob: 0.0,
            jitter_prob: 0.0,
            drop_prob: 0.0,
            smooth_prob: 0.0,
            reflect_prob: 0.0,
            ..Self::view_a()
        }
    }

    /// Only the window mask (the crop analog) and the flip.
    pub fn crop_only(&self) -> Self {
        Self {
            jitter_prob: 0.0,
            drop_prob: 0.0,
            smooth_prob: 0.0,
            reflect_prob: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("mask_prob", self.mask_prob),
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("drop_prob", self.drop_prob),
            ("drop_rate", self.drop_rate),
            ("smooth_prob", self.smooth_prob),
            ("reflect_prob", self.reflect_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(0.0 <= self.mask_min_frac
            && self.mask_min_frac <= self.mask_max_frac
            && self.mask_max_frac <= 0.5)
        {
            return Err(Error::Config(
                "mask fractions must satisfy 0 <= min <= max <= 0.5".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_max_frac) {
            return Err(Error::Config("flip_max_frac must lie in [0, 1]".into()));
        }
        if !(self.jitter_scale >= 0.0) {
            return Err(Error::Config("jitter_scale must be non-negative".into()));
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based seed for one augmentation draw.
pub fn sample_seed(run_seed: u64, epoch: u64, sample_index: u64, view: u64) -> u64 {
    [epoch, sample_index, view]
        .into_iter()
        .fold(splitmix64(run_seed), |h, v| splitmix64(h ^ splitmix64(v)))
}

fn span(rng: &mut ChaCha8Rng, dim: usize, len: usize) -> std::ops::Range<usize> {
    let len = len.min(dim);
    let start = rng.random_range(0..=dim - len);
    start..start + len
}

/// Applies the pipeline in fixed order: mask, flip, jitter, dropout, smooth,
/// reflect. Pure in `(x, cfg, seed)`.
pub fn augment(x: &[f64], cfg: &AugmentationConfig, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = x.len();
    let mut v = x.to_vec();
    if dim == 0 {
        return v;
    }

    if rng.random_bool(cfg.mask_prob) {
        let lo = (cfg.mask_min_frac * dim as f64).round() as usize;
        let hi = ((cfg.mask_max_frac * dim as f64).floor() as usize).max(lo);
        let len = rng.random_range(lo..=hi);
        for i in span(&mut rng, dim, len) {
            v[i] = 0.0;
        }
    }
    if rng.random_bool(cfg.flip_prob) {
        let hi = ((cfg.flip_max_frac * dim as f64).floor() as usize).max(1);
        let len = rng.random_range(1..=hi);
        for i in span(&mut rng, dim, len) {
            v[i] = -v[i];
        }
    }
    if rng.random_bool(cfg.jitter_prob) {
        for e in v.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *e += cfg.jitter_scale * g;
        }
    }
    if rng.random_bool(cfg.drop_prob) {
        for e in v.iter_mut() {
            if rng.random_bool(cfg.drop_rate) {
                *e = 0.0;
            }
        }
    }
    if rng.random_bool(cfg.smooth_prob) && dim > 1 {
        let src = v.clone();
        for i in 0..dim {
            let left = src[i.saturating_sub(1)];
            let right = src[(i + 1).min(dim - 1)];
            v[i] = 0.25 * left + 0.5 * src[i] + 0.25 * right;
        }
    }
    if rng.random_bool(cfg.reflect_prob) {
        let t = cfg.reflect_threshold;
        for e in v.iter_mut() {
            if *e > t {
                *e = 2.0 * t - *e;
            }
        }
    }
    v
}

/// Augments the given dataset rows into a batch matrix.
pub fn augment_batch(
    dataset: &Dataset,
    indices: &[usize],
    cfg: &AugmentationConfig,
    run_seed: u64,
    epoch: u64,
    view: u64,
) -> Matrix {
    let rows: Vec<Vec<f64>> = indices
        .iter()
        .map(|&i| {
            let seed = sample_seed(run_seed, epoch, i as u64, view);
            augment(&dataset.samples[i].x, cfg, seed)
        })
        .collect();
    if rows.is_empty() {
        return Matrix::zeros(0, dataset.dim);
    }
    Matrix::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_collapses_classes() {
        let cfg = DatasetConfig {
            within_class_noise: 0.0,
            samples_per_class: 5,
            ..DatasetConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        for s in &ds.samples {
            assert_eq!(s.x.as_slice(), ds.centroids.row(s.label));
        }
        for k in 0..cfg.num_classes {
            let n: f64 = ds.centroids.row(k).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - cfg.centroid_scale).abs() < 1e-12);
        }
    }

    #[test]
    fn dataset_is_deterministic() {
        let cfg = DatasetConfig::default();
        assert_eq!(generate_dataset(&cfg).unwrap(), generate_dataset(&cfg).unwrap());
        let other = DatasetConfig { seed: 8, ..cfg.clone() };
        assert_ne!(generate_dataset(&cfg).unwrap(), generate_dataset(&other).unwrap());
    }

    #[test]
    fn nearest_centroid_on_fresh_draw() {
        let cfg = DatasetConfig {
            centroid_scale: 8.0,
            within_class_noise: 1.0,
            ..DatasetConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let fresh = draw_samples(&ds.centroids, 200, cfg.within_class_noise, &mut rng);
        let hits = fresh
            .iter()
            .filter(|s| nearest_centroid(&ds.centroids, &s.x) == s.label)
            .count();
        assert!(hits as f64 / fresh.len() as f64 >= 0.99);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = DatasetConfig::default();
        cfg.num_classes = 1;
        assert!(generate_dataset(&cfg).is_err());
        let mut a = AugmentationConfig::view_a();
        a.mask_max_frac = 0.6;
        assert!(a.validate().is_err());
        let mut a = AugmentationConfig::view_b();
        a.flip_prob = 1.5;
        assert!(a.validate().is_err());
        assert!(AugmentationConfig::view_a().validate().is_ok());
    }

    #[test]
    fn identity_pipeline() {
        let x: Vec<f64> = (0..16).map(|i| i as f64 - 3.5).collect();
        for seed in 0..10 {
            assert_eq!(augment(&x, &AugmentationConfig::none(), seed), x);
        }
    }

    #[test]
    fn half_mask_leaves_contiguous_zero_run() {
        let cfg = AugmentationConfig {
            mask_prob: 1.0,
            mask_min_frac: 0.5,
            mask_max_frac: 0.5,
            ..AugmentationConfig::none()
        };
        let x = vec![1.0; 32];
        for seed in 0..20 {
            let y = augment(&x, &cfg, seed);
            let zeros: Vec<usize> = (0..32).filter(|&i| y[i] == 0.0).collect();
            assert_eq!(zeros.len(), 16);
            assert_eq!(zeros.last().unwrap() - zeros[0], 15);
        }
    }

    #[test]
    fn reflect_and_smooth() {
        let cfg = AugmentationConfig {
            reflect_prob: 1.0,
            reflect_threshold: 1.0,
            ..AugmentationConfig::none()
        };
        assert_eq!(augment(&[0.5, 1.5, 3.0], &cfg, 0), vec![0.5, 0.5, -1.0]);
        let cfg = AugmentationConfig {
            smooth_prob: 1.0,
            ..AugmentationConfig::none()
        };
        assert_eq!(augment(&[0.0, 4.0, 0.0, 0.0], &cfg, 0), vec![1.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let a = sample_seed(1, 0, 5, 0);
        assert_eq!(a, sample_seed(1, 0, 5, 0));
        assert_ne!(a, sample_seed(1, 0, 5, 1));
        assert_ne!(a, sample_seed(1, 1, 5, 0));
        assert_ne!(a, sample_seed(1, 0, 6, 0));
        assert_ne!(a, sample_seed(2, 0, 5, 0));
    }

    #[test]
    fn augmentation_is_replayable_across_threads() {
        let ds = generate_dataset(&DatasetConfig::default()).unwrap();
        let cfg = AugmentationConfig::view_b();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let serial = augment_batch(&ds, &idx, &cfg, 3, 2, 1);
        let chunks: Vec<Matrix> = std::thread::scope(|s| {
            let handles: Vec<_> = idx
                .chunks(100)
                .map(|c| s.spawn(|| augment_batch(&ds, c, &cfg, 3, 2, 1)))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let mut rows = 0;
        for chunk in &chunks {
            for r in 0..chunk.rows() {
                assert_eq!(chunk.row(r), serial.row(rows));
                rows += 1;
            }
        }
        assert_eq!(rows, ds.len());
    }

    #[test]
    fn export_import_roundtrip() {
        let ds = generate_dataset(&DatasetConfig {
            samples_per_class: 3,
            ..DatasetConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.txt");
        ds.write(&path).unwrap();
        let back = Dataset::read(&path).unwrap();
        assert_eq!(back.samples, ds.samples);
        assert_eq!((back.dim, back.num_classes, back.seed), (ds.dim, ds.num_classes, ds.seed));

        std::fs::write(&path, "tico-dataset 1\ndim 2 classes 2 samples 1 seed 0\n5 1.0 2.0\n").unwrap();
        assert!(matches!(Dataset::read(&path), Err(Error::Parse { .. })));
    }
}
