use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup from `lr_init` to `lr_peak`, a constant hold, then an
/// exponential decay to `lr_final`, which is kept afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriStage {
    pub warmup: u64,
    pub hold: u64,
    pub decay: u64,
    pub lr_init: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
}

impl TriStage {
    /// 5k warmup from 6e-6 to 1e-5, 20k hold, 75k decay to 1e-6.
    pub fn full_scale() -> Self {
        Self {
            warmup: 5_000,
            hold: 20_000,
            decay: 75_000,
            lr_init: 6e-6,
            lr_peak: 1e-5,
            lr_final: 1e-6,
        }
    }

    /// Same stage proportions as [`TriStage::full_scale`] over `total` steps.
    pub fn scaled(total: u64, lr_init: f64, lr_peak: f64, lr_final: f64) -> Self {
        let warmup = total / 20;
        let hold = total / 5;
        Self {
            warmup,
            hold,
            decay: total - warmup - hold,
            lr_init,
            lr_peak,
            lr_final,
        }
    }

    pub fn validate(&self, total: u64) -> Result<()> {
        if self.warmup + self.hold + self.decay > total {
            return Err(Error::InvalidConfig(format!(
                "stages {} + {} + {} exceed {total} steps",
                self.warmup, self.hold, self.decay
            )));
        }
        for (k, v) in [("lr_init", self.lr_init), ("lr_peak", self.lr_peak), ("lr_final", self.lr_final)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{k} = {v} must be positive")));
            }
        }
        Ok(())
    }

    pub fn lr(&self, step: u64) -> f64 {
        tri_stage_lr(step, self)
    }
}

pub fn tri_stage_lr(step: u64, s: &TriStage) -> f64 {
    if step < s.warmup {
        return s.lr_init + (s.lr_peak - s.lr_init) * step as f64 / s.warmup as f64;
    }
    let step = step - s.warmup;
    if step < s.hold {
        return s.lr_peak;
    }
    let step = step - s.hold;
    if step < s.decay {
        return s.lr_peak * (s.lr_final / s.lr_peak).powf(step as f64 / s.decay as f64);
    }
    s.lr_final
}
