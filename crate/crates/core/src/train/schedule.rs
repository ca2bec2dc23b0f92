use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Linear warmup to `peak_lr`, then cosine decay to `min_lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub peak_lr: f64,
    pub min_lr: f64,
}

impl Schedule {
    /// Learning rate at training fraction `t ∈ [0, 1]`.
    pub fn lr_at(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        let warm = if self.total_epochs > 0.0 {
            (self.warmup_epochs / self.total_epochs).clamp(0.0, 1.0)
        } else {
            0.0
        };
        if t < warm {
            return self.peak_lr * t / warm;
        }
        let u = if warm < 1.0 { (t - warm) / (1.0 - warm) } else { 1.0 };
        self.min_lr + (self.peak_lr - self.min_lr) * (1.0 + (PI * u).cos()) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    const S: Schedule = Schedule {
        warmup_epochs: 5.0,
        total_epochs: 50.0,
        peak_lr: 3e-3,
        min_lr: 1e-6,
    };

    #[test]
    fn landmarks() {
        assert_eq!(S.lr_at(0.0), 0.0);
        assert_eq!(S.lr_at(0.1), 3e-3);
        assert!((S.lr_at(1.0) - 1e-6).abs() < 1e-18);
        let mid = Schedule { min_lr: 0.0, ..S };
        assert!((mid.lr_at(0.55) - 1.5e-3).abs() < 1e-15);
        let no_warm = Schedule {
            warmup_epochs: 0.0,
            ..S
        };
        assert_eq!(no_warm.lr_at(0.0), 3e-3);
    }

    proptest! {
        #[test]
        fn continuous_and_bounded(t in 0.0f64..1.0) {
            let h = 1e-9;
            prop_assert!((S.lr_at(t + h) - S.lr_at(t)).abs() < 1e-9);
            prop_assert!(S.lr_at(t) <= S.peak_lr + 1e-18);
            prop_assert!(S.lr_at(t) >= 0.0);
        }
    }
}
