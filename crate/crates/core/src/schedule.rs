//! Linear warmup followed by cosine decay.

use alloc::format;

use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Learning rate at macro-step `t`, `0 ≤ t ≤ total_steps`.
pub fn lr_at(t: u64, cfg: &TrainConfig) -> Result<f64> {
    let (w, total) = (cfg.warmup_steps, cfg.total_steps);
    if t > total {
        return Err(Error::Contract(format!("step {t} beyond total_steps {total}")));
    }
    if t <= w {
        return Ok(cfg.lr_max * (t as f64 / w as f64));
    }
    let progress = (t - w) as f64 / (total - w) as f64;
    Ok(cfg.lr_max * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress)))
}

/// Sequences contributing to one optimizer step.
pub fn effective_batch(cfg: &TrainConfig) -> usize {
    cfg.micro_batch * cfg.accumulation_steps
}
