//! Learning-rate schedule and early stopping.

use std::f64::consts::PI;

/// Linear warmup to `base_lr` over `warmup_steps`, then cosine decay to 0
/// at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    0.5 * base_lr * (1.0 + (PI * progress).cos())
}

/// Warmup length: 5% of the run by default.
pub fn warmup_steps(total_steps: usize, fraction: f64) -> usize {
    (total_steps as f64 * fraction).round() as usize
}

/// True when the best score (first occurrence) is older than the last
/// `patience` evaluations.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    if history.len() <= patience {
        return false;
    }
    let mut best = 0;
    for (i, &v) in history.iter().enumerate() {
        if v > history[best] {
            best = i;
        }
    }
    best < history.len() - patience
}
