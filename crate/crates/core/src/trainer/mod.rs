//! The training loop: two augmented views, online and momentum branches, the
//! exponential-moving covariance, a LARS step on the online parameters, then
//! the momentum update.

pub mod lars;
pub mod schedule;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{augment_batch, sample_seed, AugmentationConfig, Dataset};
use crate::ema::{CovarianceState, MomentumState};
use crate::error::{Error, Result};
use crate::eval::effective_rank;
use crate::linalg::{Matrix, NORMALIZE_EPS};
use crate::losses::{self, LossKind};
use crate::model::{self, embed_values, project_values, ArchitectureConfig, EncoderPair, Parameters};

pub use lars::{Lars, LarsConfig};
pub use schedule::{alpha_schedule, lr_schedule};

/// Which branch feeds the running covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceSource {
    Online,
    Momentum,
}

impl std::str::FromStr for CovarianceSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "online" => Ok(Self::Online),
            "momentum" => Ok(Self::Momentum),
            other => Err(Error::Config(format!("unknown covariance source `{other}`"))),
        }
    }
}

impl CovarianceSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Online => "online",
            Self::Momentum => "momentum",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub rho: f64,
    pub beta: f64,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub tau: f64,
    pub barlow_lambda: f64,
    pub seed: u64,
    pub covariance_source: CovarianceSource,
    pub grad_through_covariance: bool,
    pub symmetrize: bool,
    pub loss_kind: LossKind,
    pub lars: LarsConfig,
    pub view_a: AugmentationConfig,
    pub view_b: AugmentationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            base_lr: 0.2 * 64.0 / 256.0,
            final_lr: 0.002 * 64.0 / 256.0,
            warmup_epochs: 10,
            weight_decay: 1.5e-6,
            rho: 8.0,
            beta: 0.9,
            alpha_start: 0.99,
            alpha_end: 1.0,
            tau: 0.2,
            barlow_lambda: 0.005,
            seed: 0,
            covariance_source: CovarianceSource::Online,
            grad_through_covariance: false,
            symmetrize: false,
            loss_kind: LossKind::Tico,
            lars: LarsConfig::default(),
            view_a: AugmentationConfig::view_a(),
            view_b: AugmentationConfig::view_b(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return fail(format!(
                "warmup_epochs ({}) must be smaller than epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.rho >= 0.0) {
            return fail(format!("rho must be non-negative, got {}", self.rho));
        }
        for (name, v) in [("beta", self.beta), ("alpha_start", self.alpha_start), ("alpha_end", self.alpha_end)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.base_lr >= 0.0) || !(self.final_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return fail("learning rates and weight decay must be non-negative".into());
        }
        if !(self.tau > 0.0) || !(self.barlow_lambda > 0.0) {
            return fail("tau and barlow_lambda must be positive".into());
        }
        self.lars.validate()?;
        self.view_a.validate()?;
        self.view_b.validate()
    }
}

/// One epoch's worth of averaged step metrics plus end-of-epoch diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: u64,
    pub loss: f64,
    /// `1 − mean z′ᵢ·z″ᵢ`.
    pub invariance: f64,
    /// `(ρ/n) Σ z′ᵢᵀ C z′ᵢ` with the running covariance.
    pub contrast: f64,
    /// Effective rank of the running covariance.
    pub effective_rank: f64,
    /// Effective rank of the covariance of clean-input online embeddings.
    pub embedding_rank: f64,
    pub cov_trace: f64,
    pub lr: f64,
    pub alpha: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str =
        "epoch,steps,loss,invariance,contrast,effective_rank,embedding_rank,cov_trace,lr,alpha";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.epoch,
            self.steps,
            self.loss,
            self.invariance,
            self.contrast,
            self.effective_rank,
            self.embedding_rank,
            self.cov_trace,
            self.lr,
            self.alpha
        )
    }
}

/// Everything a single step produced.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub step: u64,
    pub loss: f64,
    pub invariance: f64,
    pub contrast: f64,
    /// Online embeddings of the first view.
    pub z_online: Matrix,
    /// Momentum embeddings of the second view.
    pub z_momentum: Matrix,
    pub lr: f64,
    pub alpha: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub pair: EncoderPair,
    pub covariance: CovarianceState,
    pub metrics: Vec<EpochMetrics>,
}

/// Step-wise training state.
pub struct Trainer<'d> {
    cfg: TrainConfig,
    arch: ArchitectureConfig,
    dataset: &'d Dataset,
    online: Parameters,
    momentum: MomentumState,
    covariance: CovarianceState,
    optimizer: Lars,
    step: u64,
    epoch: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: TrainConfig, arch: ArchitectureConfig, dataset: &'d Dataset) -> Result<Self> {
        let pair = EncoderPair::init(&arch, cfg.seed)?;
        Self::from_pair(cfg, pair, dataset)
    }

    pub fn from_pair(cfg: TrainConfig, pair: EncoderPair, dataset: &'d Dataset) -> Result<Self> {
        cfg.validate()?;
        pair.arch.validate()?;
        if dataset.dim != pair.arch.input_dim {
            return Err(Error::Config(format!(
                "dataset dim {} does not match input_dim {}",
                dataset.dim, pair.arch.input_dim
            )));
        }
        if dataset.len() < cfg.batch_size {
            return Err(Error::Config(format!(
                "dataset has {} samples, fewer than one batch of {}",
                dataset.len(),
                cfg.batch_size
            )));
        }
        let momentum = MomentumState::new(cfg.alpha_start, pair.momentum)?;
        let covariance = CovarianceState::new(pair.arch.embed_dim, cfg.beta)?;
        let optimizer = Lars::new(cfg.lars, &pair.online);
        let mut trainer = Self {
            cfg,
            arch: pair.arch,
            dataset,
            online: pair.online,
            momentum,
            covariance,
            optimizer,
            step: 0,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        trainer.reshuffle();
        Ok(trainer)
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.dataset.len() / self.cfg.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.cfg.epochs as u64
    }

    pub fn online(&self) -> &Parameters {
        &self.online
    }

    pub fn momentum(&self) -> &Parameters {
        &self.momentum.xi
    }

    pub fn covariance(&self) -> &CovarianceState {
        &self.covariance
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn into_pair(self) -> (EncoderPair, CovarianceState) {
        (
            EncoderPair {
                online: self.online,
                momentum: self.momentum.xi,
                arch: self.arch,
            },
            self.covariance,
        )
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.dataset.len()).collect();
        let seed = sample_seed(self.cfg.seed, self.epoch as u64, u64::MAX, 2);
        self.order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        self.cursor = 0;
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let n = self.cfg.batch_size;
        // The trailing partial batch is dropped.
        if self.cursor + n > self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let batch = self.order[self.cursor..self.cursor + n].to_vec();
        self.cursor += n;
        batch
    }

    /// Online branch output that the loss consumes, plus its unit-norm rows.
    fn online_branch<'t>(
        &self,
        tape: &'t Tape,
        bound: &model::Bound<'t>,
        x: &Matrix,
    ) -> Result<(Var<'t>, Matrix)> {
        let x = tape.constant(x.clone());
        if self.cfg.loss_kind == LossKind::Barlow {
            let p = model::project(&self.arch, bound, x)?;
            let z = p.value().normalize_rows(NORMALIZE_EPS);
            Ok((p, z))
        } else {
            let z = model::embed(&self.arch, bound, x)?;
            let v = z.value();
            Ok((z, v))
        }
    }

    /// Momentum branch target for the loss, plus its unit-norm rows.
    fn momentum_branch(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        if self.cfg.loss_kind == LossKind::Barlow {
            let p = project_values(&self.arch, &self.momentum.xi, x)?;
            let z = p.normalize_rows(NORMALIZE_EPS);
            Ok((p, z))
        } else {
            let z = embed_values(&self.arch, &self.momentum.xi, x)?;
            Ok((z.clone(), z))
        }
    }

    fn assemble_loss<'t>(
        &self,
        tape: &'t Tape,
        online: Var<'t>,
        target: &Matrix,
        cov_before: &Matrix,
    ) -> Result<Var<'t>> {
        let cfg = &self.cfg;
        match cfg.loss_kind {
            LossKind::Tico if cfg.grad_through_covariance && cfg.covariance_source == CovarianceSource::Online => {
                let z1 = online;
                let n = z1.shape().0 as f64;
                let prior = tape.constant(cov_before.scale(cfg.beta));
                let batch = z1.transpose().matmul(&z1)?.scale((1.0 - cfg.beta) / n);
                let c = prior.add(&batch)?;
                let quad = z1.matmul(&c)?.rowwise_dot(&z1)?.sum().scale(cfg.rho / n);
                let align = z1.rowwise_dot(&tape.constant(target.clone()))?.sum().scale(-1.0 / n);
                tape.constant(Matrix::scalar(1.0)).add(&align)?.add(&quad)
            }
            LossKind::Tico => losses::tico_loss_var(online, target, &self.covariance.c, cfg.rho),
            LossKind::Squared => losses::squared_contrastive_batch_var(online, target, cfg.rho),
            LossKind::Infonce => losses::infonce_var(online, target, cfg.tau),
            LossKind::Barlow => losses::barlow_twins_var(online, target, cfg.barlow_lambda),
        }
    }

    /// Runs one optimization step.
    pub fn step(&mut self) -> Result<StepOutput> {
        let batch = self.next_batch();
        let epoch = self.epoch as u64;
        let cfg = self.cfg.clone();
        let x1 = augment_batch(self.dataset, &batch, &cfg.view_a, cfg.seed, epoch, 0);
        let x2 = augment_batch(self.dataset, &batch, &cfg.view_b, cfg.seed, epoch, 1);

        let tape = Tape::new();
        let bound = self.online.bind(&tape, true);
        let cov_before = self.covariance.c.clone();

        let (out1, z_online) = self.online_branch(&tape, &bound, &x1)?;
        let (target2, z_momentum) = self.momentum_branch(&x2)?;
        // C is refreshed from this batch before the loss reads it.
        let source = match cfg.covariance_source {
            CovarianceSource::Online => &z_online,
            CovarianceSource::Momentum => &z_momentum,
        };
        if source.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!(
                "step {} (epoch {}): non-finite embeddings before the covariance update, cov trace {}",
                self.step,
                self.epoch,
                self.covariance.c.trace()
            )));
        }
        self.covariance.update(source)?;

        let first = self.assemble_loss(&tape, out1, &target2, &cov_before)?;
        let loss_var = if cfg.symmetrize {
            let (out2, _) = self.online_branch(&tape, &bound, &x2)?;
            let (target1, _) = self.momentum_branch(&x1)?;
            let second = self.assemble_loss(&tape, out2, &target1, &cov_before)?;
            first.add(&second)?.scale(0.5)
        } else {
            first
        };

        let loss = loss_var.item();
        let parts = losses::tico_parts(&z_online, &z_momentum, &self.covariance.c, cfg.rho)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "step {} (epoch {}): loss {loss}, invariance {}, contrast {}, max |grad| n/a, cov trace {}",
                self.step,
                self.epoch,
                parts.invariance,
                parts.contrast,
                self.covariance.c.trace()
            )));
        }
        let grads_map = tape.backward(loss_var)?;
        let grads: Vec<Matrix> = bound.vars.iter().map(|v| grads_map.wrt(*v)).collect();
        let bad_slice = self
            .online
            .slices
            .iter()
            .zip(&grads)
            .find(|(_, g)| g.as_slice().iter().any(|v| !v.is_finite()))
            .map(|(s, _)| s.name.clone());
        let max_abs_grad = grads.iter().map(Matrix::max_abs).fold(0.0, f64::max);
        if let Some(slice) = bad_slice {
            return Err(Error::Diverged(format!(
                "step {} (epoch {}): non-finite gradient in `{slice}`, loss {loss}, invariance {}, contrast {}, max |grad| {max_abs_grad}, cov trace {}",
                self.step,
                self.epoch,
                parts.invariance,
                parts.contrast,
                self.covariance.c.trace()
            )));
        }

        let lr = lr_schedule(&cfg, self.step, self.steps_per_epoch());
        self.optimizer.step(&mut self.online, &grads, lr, cfg.weight_decay)?;
        let alpha = alpha_schedule(&cfg, self.step, self.total_steps());
        self.momentum.set_alpha(alpha)?;
        self.momentum.update(&self.online)?;

        let out = StepOutput {
            step: self.step,
            loss,
            invariance: parts.invariance,
            contrast: parts.contrast,
            z_online,
            z_momentum,
            lr,
            alpha,
            max_abs_grad,
        };
        self.step += 1;
        Ok(out)
    }

    /// Effective rank of the covariance of online embeddings of every clean
    /// sample, computed as one batch.
    pub fn embedding_rank(&self) -> Result<f64> {
        let z = embed_values(&self.arch, &self.online, &self.dataset.features())?;
        effective_rank(&z.covariance()?)
    }

    /// Runs one epoch and summarizes it.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let spe = self.steps_per_epoch();
        let epoch = (self.step / spe) as usize;
        let mut acc = [0.0; 3];
        let mut last = None;
        for _ in 0..spe {
            let out = self.step()?;
            acc[0] += out.loss;
            acc[1] += out.invariance;
            acc[2] += out.contrast;
            last = Some((out.lr, out.alpha));
        }
        let (lr, alpha) = last.unwrap_or((0.0, self.momentum.alpha));
        let k = spe as f64;
        Ok(EpochMetrics {
            epoch,
            steps: self.step,
            loss: acc[0] / k,
            invariance: acc[1] / k,
            contrast: acc[2] / k,
            effective_rank: effective_rank(&self.covariance.c)?,
            embedding_rank: self.embedding_rank()?,
            cov_trace: self.covariance.c.trace(),
            lr,
            alpha,
        })
    }
}

/// Trains from a fresh initialization for `cfg.epochs` epochs.
pub fn train(cfg: &TrainConfig, arch: &ArchitectureConfig, dataset: &Dataset) -> Result<TrainedModel> {
    train_with(cfg, arch, dataset, |_| {})
}

/// Like [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    cfg: &TrainConfig,
    arch: &ArchitectureConfig,
    dataset: &Dataset,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainedModel> {
    let mut trainer = Trainer::new(cfg.clone(), arch.clone(), dataset)?;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let m = trainer.run_epoch()?;
        on_epoch(&m);
        metrics.push(m);
    }
    let (pair, covariance) = trainer.into_pair();
    Ok(TrainedModel {
        pair,
        covariance,
        metrics,
    })
}
