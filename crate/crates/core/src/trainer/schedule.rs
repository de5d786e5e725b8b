//! Learning-rate and momentum-coefficient schedules, evaluated per step.

use std::f64::consts::PI;

use super::TrainConfig;

/// Linear warmup from 0 to `base_lr`, then cosine decay to `final_lr` at the
/// last step.
pub fn lr_schedule(cfg: &TrainConfig, step: u64, steps_per_epoch: u64) -> f64 {
    let warmup = cfg.warmup_epochs as u64 * steps_per_epoch;
    let total = cfg.epochs as u64 * steps_per_epoch;
    if step < warmup {
        return cfg.base_lr * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup + 1);
    let progress = if span == 0 {
        0.0
    } else {
        ((step - warmup) as f64 / span as f64).min(1.0)
    };
    cfg.final_lr + 0.5 * (cfg.base_lr - cfg.final_lr) * (1.0 + (PI * progress).cos())
}

/// Cosine interpolation of `1 − α` from `1 − alpha_start` at step 0 to
/// `1 − alpha_end` at the last step.
pub fn alpha_schedule(cfg: &TrainConfig, step: u64, total_steps: u64) -> f64 {
    let progress = if total_steps <= 1 {
        0.0
    } else {
        (step as f64 / (total_steps - 1) as f64).min(1.0)
    };
    let start = 1.0 - cfg.alpha_start;
    let end = 1.0 - cfg.alpha_end;
    let one_minus = end + 0.5 * (start - end) * (1.0 + (PI * progress).cos());
    1.0 - one_minus
}
