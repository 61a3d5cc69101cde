//! Learning-rate schedules over 1-indexed optimizer steps.

use std::f64::consts::PI;

use crate::error::{AstraError, Result};

/// Linear warmup to `peak` over `warmup` steps, then cosine decay reaching 0
/// at step `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupCosine {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl WarmupCosine {
    pub fn new(peak: f64, warmup: usize, total: usize) -> Result<Self> {
        if !(peak > 0.0) || total == 0 || warmup > total {
            return Err(AstraError::Config(format!(
                "invalid schedule: peak {peak}, warmup {warmup}, total {total} (need peak > 0, warmup <= total)"
            )));
        }
        Ok(WarmupCosine { peak, warmup, total })
    }

    /// Cosine decay with no warmup.
    pub fn cosine(peak: f64, total: usize) -> Result<Self> {
        Self::new(peak, 0, total)
    }

    pub fn lr(&self, step: usize) -> f64 {
        let step = step.clamp(1, self.total);
        if step <= self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        let span = self.total - self.warmup;
        if span == 0 {
            return self.peak;
        }
        let progress = (step - self.warmup) as f64 / span as f64;
        self.peak * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_midpoint_is_half_peak() {
        let s = WarmupCosine::new(2e-4, 2000, 10_000).unwrap();
        assert!((s.lr(1000) - 1e-4).abs() < 1e-15);
        assert_eq!(s.lr(2000), 2e-4);
    }

    #[test]
    fn final_step_reaches_zero() {
        let s = WarmupCosine::new(2e-4, 2000, 10_000).unwrap();
        assert!(s.lr(10_000).abs() < 1e-9);
        assert!(WarmupCosine::cosine(1e-4, 7).unwrap().lr(7).abs() < 1e-9);
    }

    #[test]
    fn continuous_at_junction_and_monotone_after() {
        let s = WarmupCosine::new(1e-3, 30, 300).unwrap();
        assert!((s.lr(30) - s.lr(31)).abs() < 1e-3 * 1e-3);
        for t in 31..300 {
            assert!(s.lr(t + 1) <= s.lr(t));
        }
        for t in 1..30 {
            assert!(s.lr(t + 1) > s.lr(t));
        }
    }

    #[test]
    fn warmup_longer_than_run_rejected() {
        assert!(WarmupCosine::new(2e-4, 2000, 300).is_err());
        assert!(WarmupCosine::new(0.0, 0, 300).is_err());
    }
}
