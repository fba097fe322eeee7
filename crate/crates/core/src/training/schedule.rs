use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    ConstantAfterWarmup,
    Cosine,
}

/// Number of warmup steps for a run of `total_steps`.
pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    ((warmup_fraction * total_steps as f64).ceil() as usize).min(total_steps)
}

/// Learning rate at `step` of `total_steps`: a linear ramp from 0 to `peak`
/// over the warmup, then either flat or a half-cosine down to 0 at
/// `total_steps`. Steps past the end clamp to the final value.
pub fn lr_at(step: usize, total_steps: usize, peak: f64, warmup_fraction: f64, schedule: Schedule) -> f64 {
    let step = step.min(total_steps);
    let warmup = warmup_steps(total_steps, warmup_fraction);
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    match schedule {
        Schedule::ConstantAfterWarmup => peak,
        Schedule::Cosine => {
            let span = total_steps - warmup;
            if span == 0 {
                return 0.0;
            }
            let progress = (step - warmup) as f64 / span as f64;
            0.5 * peak * (1.0 + (PI * progress).cos())
        }
    }
}
