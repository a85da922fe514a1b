//! Linear warmup followed by linear decay to zero.

/// Learning rate at `step` (0-based): rises linearly from 0 to `base_lr`
/// over `round(warmup_ratio * total_steps)` steps, then decays linearly to
/// 0 at `total_steps`. The warmup boundary is an integer step so the
/// schedule hits `base_lr` exactly there. Steps past the end clamp to 0.
pub fn lr_schedule(step: u64, total_steps: u64, warmup_ratio: f64, base_lr: f64) -> f64 {
    assert!(total_steps >= 1, "lr_schedule requires total_steps >= 1");
    assert!((0.0..=1.0).contains(&warmup_ratio), "warmup_ratio must lie in [0, 1]");
    if step >= total_steps {
        return 0.0;
    }
    let warmup_steps = (warmup_ratio * total_steps as f64).round() as u64;
    if step < warmup_steps {
        base_lr * (step as f64 / warmup_steps as f64)
    } else {
        base_lr * ((total_steps - step) as f64 / (total_steps - warmup_steps) as f64)
    }
}
