//! Cosine annealing with warm restarts, evaluated per epoch.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    /// Length of the first cycle in epochs.
    pub t_0: usize,
    /// Growth factor applied to the cycle length at every restart.
    pub t_mult: usize,
    pub eta_min: f64,
}

impl LrSchedule {
    pub fn new(base_lr: f64) -> Self {
        Self {
            base_lr,
            t_0: 10,
            t_mult: 2,
            eta_min: 0.0,
        }
    }

    /// Position inside the current cycle as `(t_cur, t_i)`.
    pub fn cycle_position(&self, epoch: usize) -> (usize, usize) {
        let t_0 = self.t_0.max(1);
        if self.t_mult <= 1 {
            return (epoch % t_0, t_0);
        }
        let mut t_cur = epoch;
        let mut t_i = t_0;
        while t_cur >= t_i {
            t_cur -= t_i;
            t_i *= self.t_mult;
        }
        (t_cur, t_i)
    }
}

/// Learning rate for a zero-based `epoch`.
pub fn lr_at(schedule: &LrSchedule, epoch: usize) -> f64 {
    let (t_cur, t_i) = schedule.cycle_position(epoch);
    let phase = std::f64::consts::PI * t_cur as f64 / t_i as f64;
    let lr = schedule.eta_min + 0.5 * (schedule.base_lr - schedule.eta_min) * (1.0 + phase.cos());
    lr.clamp(schedule.eta_min, schedule.base_lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn restarts_follow_growing_cycles() {
        let s = LrSchedule::new(1e-4);
        // cycles of 10, 20, 40 epochs
        assert_eq!(s.cycle_position(0), (0, 10));
        assert_eq!(s.cycle_position(9), (9, 10));
        assert_eq!(s.cycle_position(10), (0, 20));
        assert_eq!(s.cycle_position(29), (19, 20));
        assert_eq!(s.cycle_position(30), (0, 40));
    }

    #[test]
    fn restart_and_midpoint_values() {
        let s = LrSchedule::new(1e-4);
        assert!((lr_at(&s, 0) - 1e-4).abs() < 1e-12);
        assert!((lr_at(&s, 10) - 1e-4).abs() < 1e-12);
        assert!((lr_at(&s, 5) - 0.5e-4).abs() < 1e-12);
        assert!((lr_at(&s, 20) - 0.5e-4).abs() < 1e-12);
    }

    #[test]
    fn constant_cycle_length_when_t_mult_is_one() {
        let s = LrSchedule {
            base_lr: 1.0,
            t_0: 4,
            t_mult: 1,
            eta_min: 0.1,
        };
        assert_eq!(lr_at(&s, 4), 1.0);
        assert_eq!(lr_at(&s, 8), 1.0);
        assert!((lr_at(&s, 2) - 0.55).abs() < 1e-12);
    }
}
