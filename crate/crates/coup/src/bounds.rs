//! Per-arm statistics and anytime confidence bounds.
//!
//! Bounds are two-sided Hoeffding intervals on [0,1] utilities. Each arm's
//! confidence share depends on both the pool size n and its own sample count
//! m, so the intervals stay simultaneously valid while the pool grows and
//! sampling continues:
//!
//! ```text
//! delta_i = delta / (26.71 * n^2 * m^2)
//! r       = sqrt(ln(2 / delta_i) / (2 m))
//! ```
//!
//! Growth of n is folded in lazily: an arm's bounds are recomputed whenever
//! it receives an observation, and a full refresh of all arms with m >= 2
//! runs only once the pool has grown 1.5x past the last refresh marker.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Sufficient statistics for one arm. Utilities lie in `[0,1]`, so
/// `0 <= total <= m` always holds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub m: u64,
    pub total: f64,
}

impl ArmStats {
    /// Empirical mean; undefined before the first observation.
    pub fn mean(&self) -> Option<f64> {
        if self.m == 0 {
            None
        } else {
            Some(self.total / self.m as f64)
        }
    }

    /// Empirical mean with unsampled arms pinned to zero.
    pub fn mean_or_zero(&self) -> f64 {
        self.mean().unwrap_or(0.0)
    }

    /// Folds in one observed utility.
    pub fn record_observation(&mut self, y: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&y) {
            return Err(Error::Config(format!("utility {y} outside [0, 1]")));
        }
        self.m += 1;
        self.total += y;
        Ok(())
    }
}

/// Confidence interval for one arm, stamped with the pool size it was
/// computed against. `delta_i` is 1.0 (vacuous) while m = 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lcb: f64,
    pub ucb: f64,
    pub delta_i: f64,
    pub pool_size_at_compute: u64,
}

impl Bounds {
    /// Vacuous bounds for an unsampled arm.
    pub fn vacuous(pool_size: u64) -> Bounds {
        Bounds {
            lcb: 0.0,
            ucb: 1.0,
            delta_i: 1.0,
            pool_size_at_compute: pool_size,
        }
    }
}

/// Per-arm confidence share `delta / (26.71 * n^2 * m^2)`.
pub fn per_arm_delta(delta: f64, n: u64, m: u64) -> Result<f64> {
    if m == 0 {
        return Err(Error::Config(
            "per-arm confidence share undefined at m = 0".into(),
        ));
    }
    debug_assert!((0.0..1.0).contains(&delta) && delta > 0.0);
    debug_assert!(n >= 1);
    let n2 = (n as f64) * (n as f64);
    let m2 = (m as f64) * (m as f64);
    Ok(delta / (26.71 * n2 * m2))
}

/// Hoeffding radius at the given confidence share and sample count.
pub fn hoeffding_radius(delta_i: f64, m: u64) -> f64 {
    ((2.0 / delta_i).ln() / (2.0 * m as f64)).sqrt()
}

/// Computes the arm's interval at pool size `n`, clipped to `[0,1]`.
pub fn compute_bounds(stats: &ArmStats, delta: f64, n: u64) -> Bounds {
    let Some(mean) = stats.mean() else {
        return Bounds::vacuous(n);
    };
    let delta_i = per_arm_delta(delta, n, stats.m).expect("m > 0");
    let r = hoeffding_radius(delta_i, stats.m);
    Bounds {
        lcb: (mean - r).max(0.0),
        ucb: (mean + r).min(1.0),
        delta_i,
        pool_size_at_compute: n,
    }
}

/// The 1.5x growth rule for deferred refresh.
pub fn refresh_due(current_pool_size: u64, last_refresh_pool_size: u64) -> bool {
    current_pool_size as f64 >= 1.5 * last_refresh_pool_size as f64
}

/// Recomputes bounds for every arm with m >= 2 at the current pool size if
/// the pool has grown 1.5x past the marker; updates the marker and reports
/// whether the refresh fired. Arms with fewer than 2 samples are skipped.
pub fn deferred_refresh<'a, I>(
    arms: I,
    delta: f64,
    current_pool_size: u64,
    last_refresh_pool_size: &mut u64,
) -> bool
where
    I: IntoIterator<Item = (&'a ArmStats, &'a mut Bounds)>,
{
    if !refresh_due(current_pool_size, *last_refresh_pool_size) {
        return false;
    }
    for (stats, bounds) in arms {
        if stats.m >= 2 {
            *bounds = compute_bounds(stats, delta, current_pool_size);
        }
    }
    *last_refresh_pool_size = current_pool_size;
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn per_arm_delta_matches_direct_arithmetic() {
        // 0.01 / (26.71 * 50^2 * 1^2) and 0.01 / 26.71, frozen externally.
        assert_relative_eq!(
            per_arm_delta(0.01, 50, 1).unwrap(),
            1.497566454511419e-7,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            per_arm_delta(0.01, 1, 1).unwrap(),
            3.743916136278547e-4,
            max_relative = 1e-12
        );
    }

    #[test]
    fn doubling_samples_quarters_the_share_exactly() {
        for &(delta, n, m) in &[(0.01, 50, 1u64), (0.13, 7, 3), (0.5, 1000, 256)] {
            let single = per_arm_delta(delta, n, m).unwrap();
            let doubled = per_arm_delta(delta, n, 2 * m).unwrap();
            assert_eq!(doubled * 4.0, single);
        }
    }

    #[test]
    fn per_arm_delta_rejects_unsampled_arms() {
        assert!(per_arm_delta(0.01, 50, 0).is_err());
    }

    #[test]
    fn unsampled_bounds_are_vacuous() {
        let b = compute_bounds(&ArmStats::default(), 0.01, 50);
        assert_eq!((b.lcb, b.ucb), (0.0, 1.0));
        assert_eq!(b.pool_size_at_compute, 50);
    }

    #[test]
    fn bounds_match_frozen_example() {
        // m=200, mean=0.95, delta=0.01, n=50: delta_i and the radius were
        // computed independently from the formulas and frozen here.
        let stats = ArmStats {
            m: 200,
            total: 190.0,
        };
        let b = compute_bounds(&stats, 0.01, 50);
        assert_relative_eq!(b.delta_i, 3.743916136278547e-12, max_relative = 1e-12);
        assert_relative_eq!(b.lcb, 0.6901729607141402, max_relative = 1e-12);
        assert_eq!(b.ucb, 1.0);
    }

    #[test]
    fn high_means_clip_at_one() {
        let stats = ArmStats { m: 5, total: 5.0 };
        let b = compute_bounds(&stats, 0.01, 10);
        assert_eq!(b.ucb, 1.0);
        assert_eq!(b.lcb, 0.0); // radius > 1 at m=5 clips both sides
        let tight = ArmStats {
            m: 100_000,
            total: 100_000.0,
        };
        assert_eq!(compute_bounds(&tight, 0.01, 10).ucb, 1.0);
    }

    #[test]
    fn record_observation_accumulates() {
        let mut stats = ArmStats::default();
        stats.record_observation(1.0).unwrap();
        assert_eq!(stats, ArmStats { m: 1, total: 1.0 });
        let mut stats = ArmStats { m: 3, total: 1.5 };
        stats.record_observation(0.5).unwrap();
        assert_eq!(stats, ArmStats { m: 4, total: 2.0 });
        assert_eq!(stats.mean(), Some(0.5));
        assert!(stats.record_observation(1.2).is_err());
        assert!(stats.record_observation(-0.1).is_err());
        assert_eq!(stats.m, 4, "failed observations must not count");
    }

    #[test]
    fn refresh_fires_only_at_growth_factor() {
        assert!(!refresh_due(149, 100));
        assert!(refresh_due(150, 100));
        assert!(refresh_due(151, 100));
    }

    #[test]
    fn refresh_recomputes_sampled_arms_and_skips_singletons() {
        let arms = vec![
            (ArmStats { m: 0, total: 0.0 }, Bounds::vacuous(100)),
            (
                ArmStats { m: 1, total: 1.0 },
                compute_bounds(&ArmStats { m: 1, total: 1.0 }, 0.01, 100),
            ),
            (
                ArmStats { m: 50, total: 30.0 },
                compute_bounds(&ArmStats { m: 50, total: 30.0 }, 0.01, 100),
            ),
        ];

        // Below the growth factor: nothing moves.
        let mut below = arms.clone();
        let mut marker = 100;
        let fired = deferred_refresh(
            below.iter_mut().map(|(s, b)| (&*s, b)),
            0.01,
            149,
            &mut marker,
        );
        assert!(!fired);
        assert_eq!(marker, 100);
        assert_eq!(below, arms);

        // At the growth factor: only the m >= 2 arm is recomputed.
        let mut at = arms.clone();
        let fired = deferred_refresh(
            at.iter_mut().map(|(s, b)| (&*s, b)),
            0.01,
            150,
            &mut marker,
        );
        assert!(fired);
        assert_eq!(marker, 150);
        assert_eq!(at[0].1, arms[0].1);
        assert_eq!(at[1].1, arms[1].1, "m=1 arm skipped by refresh");
        assert_eq!(at[2].1.pool_size_at_compute, 150);
        assert!(at[2].1.lcb < arms[2].1.lcb, "larger pool widens the interval");
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn radius_shrinks_as_samples_accumulate(
                delta in 1e-6f64..0.5,
                n in 1u64..10_000,
                m in 2u64..1_000_000,
            ) {
                let r_now = hoeffding_radius(per_arm_delta(delta, n, m).unwrap(), m);
                let r_next = hoeffding_radius(per_arm_delta(delta, n, m + 1).unwrap(), m + 1);
                prop_assert!(r_next < r_now);
            }

            #[test]
            fn pessimistic_updates_never_raise_ucb(
                m in 1u64..10_000,
                mean in 0.0f64..=1.0,
                frac in 0.0f64..=1.0,
                n in 1u64..10_000,
            ) {
                let mut stats = ArmStats { m, total: mean * m as f64 };
                let before = compute_bounds(&stats, 0.01, n);
                // Any observation at or below the current mean.
                let y = mean * frac;
                stats.record_observation(y).unwrap();
                let after = compute_bounds(&stats, 0.01, n);
                prop_assert!(after.ucb <= before.ucb);
            }

            #[test]
            fn bounds_stay_clipped_and_ordered(
                m in 0u64..100_000,
                frac in 0.0f64..=1.0,
                n in 1u64..100_000,
            ) {
                let stats = ArmStats { m, total: frac * m as f64 };
                let b = compute_bounds(&stats, 0.01, n);
                prop_assert!(0.0 <= b.lcb && b.lcb <= b.ucb && b.ucb <= 1.0);
            }
        }
    }
}
