use serde::{Deserialize, Serialize};

use crate::error::{CssError, Result};

/// Linear warm-up followed by linear decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub const PAPER: Schedule = Schedule {
        warmup_steps: 10_000,
        total_steps: 260_000,
    };
    pub const TOY: Schedule = Schedule {
        warmup_steps: 200,
        total_steps: 5_000,
    };

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(CssError::Config(format!(
                "need 0 < warmup ({}) < total ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self::TOY
    }
}

/// Learning rate at `step`: `peak·step/warmup` up to the warm-up, then
/// `peak·(total − step)/(total − warmup)`, and 0 past the end.
pub fn lr_at(step: u64, schedule: &Schedule, peak: f64) -> f64 {
    let Schedule { warmup_steps: w, total_steps: n } = *schedule;
    if step >= n {
        0.0
    } else if step <= w {
        if step == w {
            peak
        } else {
            peak * step as f64 / w as f64
        }
    } else {
        peak * (n - step) as f64 / (n - w) as f64
    }
}
