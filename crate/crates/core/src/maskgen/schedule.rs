use super::{MaskError, Result};
use serde::{Deserialize, Serialize};

/// Linear schedule of the significance ratio: `r_t = r0 + (t / T) (rT - r0)`.
///
/// With `r0 < rT` the share of loss-selected units grows over training
/// (easy-to-hard); with `r0 > rT` it shrinks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSchedule {
    pub r0: f64,
    pub r_end: f64,
    pub total_epochs: u64,
}

impl Default for MaskSchedule {
    fn default() -> Self {
        Self {
            r0: 0.0,
            r_end: 0.5,
            total_epochs: 1000,
        }
    }
}

impl MaskSchedule {
    pub fn new(r0: f64, r_end: f64, total_epochs: u64) -> Result<Self> {
        let s = Self {
            r0,
            r_end,
            total_epochs,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.r0) || !unit.contains(&self.r_end) {
            return Err(MaskError::Schedule(format!(
                "ratios must lie in [0, 1], got r0={} rT={}",
                self.r0, self.r_end
            )));
        }
        if self.total_epochs == 0 {
            return Err(MaskError::Schedule("total epochs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn easy_to_hard(&self) -> bool {
        self.r0 < self.r_end
    }

    /// Significance ratio at epoch `t`, for `0 <= t <= T`.
    pub fn ratio(&self, t: u64) -> Result<f64> {
        if t > self.total_epochs {
            return Err(MaskError::EpochOutOfRange {
                t,
                total: self.total_epochs,
            });
        }
        Ok(self.ratio_at(t as f64))
    }

    /// Same as [`MaskSchedule::ratio`] for fractional epochs, clamped to the
    /// schedule's endpoints.
    pub fn ratio_at(&self, t: f64) -> f64 {
        let frac = (t / self.total_epochs as f64).clamp(0.0, 1.0);
        let r = self.r0 + frac * (self.r_end - self.r0);
        r.clamp(self.r0.min(self.r_end), self.r0.max(self.r_end))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints_and_midpoint() {
        let s = MaskSchedule::new(0.0, 0.5, 1000).unwrap();
        assert_eq!(s.ratio(0).unwrap(), 0.0);
        assert_eq!(s.ratio(1000).unwrap(), 0.5);
        assert!((s.ratio(500).unwrap() - 0.25).abs() < 1e-12);
        assert!(matches!(s.ratio(1001), Err(MaskError::EpochOutOfRange { .. })));
        assert!(s.easy_to_hard());
        assert!(!MaskSchedule::new(0.5, 0.0, 10).unwrap().easy_to_hard());
    }

    #[test]
    fn invalid_schedules() {
        assert!(MaskSchedule::new(-0.1, 0.5, 10).is_err());
        assert!(MaskSchedule::new(0.0, 1.5, 10).is_err());
        assert!(MaskSchedule::new(0.0, 0.5, 0).is_err());
    }

    proptest! {
        #[test]
        fn linear_and_monotone(r0 in 0.0f64..=1.0, r1 in 0.0f64..=1.0, total in 2u64..2000, a in 0u64..1000, b in 0u64..1000) {
            let s = MaskSchedule::new(r0, r1, total).unwrap();
            let t1 = (a % (total + 1)) & !1;
            let t2 = (b % (total + 1)) & !1;
            let mid = (t1 + t2) / 2;
            let lhs = s.ratio(t1).unwrap() + s.ratio(t2).unwrap();
            let rhs = 2.0 * s.ratio(mid).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);

            let (lo, hi) = (t1.min(t2), t1.max(t2));
            let (rl, rh) = (s.ratio(lo).unwrap(), s.ratio(hi).unwrap());
            if r0 < r1 { prop_assert!(rl <= rh); }
            if r0 > r1 { prop_assert!(rl >= rh); }
            prop_assert!(rl >= r0.min(r1) && rl <= r0.max(r1));
        }
    }
}
