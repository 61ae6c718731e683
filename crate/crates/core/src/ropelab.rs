//! Numerical witnesses for rotary phases: relative-phase invariance, a rule
//! that no relative phase can express, and the premise test for true
//! sequence periodicity.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Rotation by `θ = 2π / T` per position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseConfig {
    period: u64,
}

impl PhaseConfig {
    pub fn new(period: u64) -> Result<Self> {
        if period == 0 {
            return Err(Error::InvalidPeriod("the implicit period must be >= 1".into()));
        }
        Ok(Self { period })
    }

    pub fn period(&self) -> u64 {
        self.period
    }

    pub fn theta(&self) -> f64 {
        2.0 * PI / self.period as f64
    }

    /// `φ(t) = θ·t`.
    pub fn phase(&self, t: i64) -> f64 {
        self.theta() * t as f64
    }

    pub fn rotate(&self, x: Complex64, t: i64) -> Complex64 {
        x * Complex64::from_polar(1.0, self.phase(t))
    }
}

/// Largest deviation seen over `trials` random draws of the product identity
/// and its invariance under a common shift of both positions.
pub fn check_relative_invariance(cfg: PhaseConfig, trials: usize) -> Result<f64> {
    if trials == 0 {
        return Err(Error::InvalidSpec("need at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x0e1a_71fe ^ cfg.period);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let mut unit = || Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let (xm, xn) = (unit(), unit());
        let m: i64 = rng.random_range(0..1024);
        let n: i64 = rng.random_range(0..1024);
        let d: i64 = rng.random_range(-512..512);
        let score = cfg.rotate(xm, m) * cfg.rotate(xn, n).conj();
        let relative = xm * xn.conj() * Complex64::from_polar(1.0, cfg.theta() * (m - n) as f64);
        let shifted = cfg.rotate(xm, m + d) * cfg.rotate(xn, n + d).conj();
        worst = worst.max((score - relative).norm()).max((shifted - score).norm());
    }
    Ok(worst)
}

/// Phase and rule differences at two position pairs a fixed distance apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleWitness {
    pub period: u64,
    pub rule: String,
    pub first: (i64, i64),
    pub second: (i64, i64),
    pub phase_diff_first: f64,
    pub phase_diff_second: f64,
    pub rule_diff_first: i64,
    pub rule_diff_second: i64,
    pub phases_equal: bool,
    pub rules_equal: bool,
    pub verdict: String,
}

pub const NOT_REPRESENTABLE: &str = "not representable";
pub const REPRESENTABLE: &str = "consistent with relative phase";

/// Compares `φ(a)−φ(b)` with `α(a)−α(b)` at `first` and `second`. If the
/// phases agree but the rule does not, no function of the phase difference
/// can produce the rule.
pub fn rule_witness(
    cfg: PhaseConfig,
    rule: &str,
    alpha: impl Fn(i64) -> i64,
    first: (i64, i64),
    second: (i64, i64),
) -> RuleWitness {
    let phase_diff_first = cfg.phase(first.0) - cfg.phase(first.1);
    let phase_diff_second = cfg.phase(second.0) - cfg.phase(second.1);
    let rule_diff_first = alpha(first.0) - alpha(first.1);
    let rule_diff_second = alpha(second.0) - alpha(second.1);
    let phases_equal = (phase_diff_first - phase_diff_second).abs() < 1e-12;
    let rules_equal = rule_diff_first == rule_diff_second;
    let verdict = if phases_equal && !rules_equal {
        NOT_REPRESENTABLE
    } else {
        REPRESENTABLE
    };
    RuleWitness {
        period: cfg.period,
        rule: rule.to_string(),
        first,
        second,
        phase_diff_first,
        phase_diff_second,
        rule_diff_first,
        rule_diff_second,
        phases_equal,
        rules_equal,
        verdict: verdict.to_string(),
    }
}

/// `T = 4`, `α(a) = a mod 3`, pairs (0, 1) and (8, 9).
pub fn rule_periodicity_counterexample() -> RuleWitness {
    let cfg = PhaseConfig { period: 4 };
    rule_witness(cfg, "a mod 3", |a| a.rem_euclid(3), (0, 1), (8, 9))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum PremiseOutcome {
    Pass,
    Violation { a: usize, b: usize },
}

/// Checks `f(a) − f(b) = f(a+T) − f(b+T)` for every `a, b` with `a+T, b+T`
/// in range and returns the first failure in `(a, b)` order.
pub fn invariance_premise_test(seq: &[i64], period: usize) -> Result<PremiseOutcome> {
    if period == 0 || period >= seq.len() {
        return Err(Error::InvalidPeriod(format!(
            "T = {period} needs 1 <= T < {} for this sequence",
            seq.len()
        )));
    }
    let n = seq.len() - period;
    for a in 0..n {
        for b in 0..n {
            if seq[a] - seq[b] != seq[a + period] - seq[b + period] {
                return Ok(PremiseOutcome::Violation { a, b });
            }
        }
    }
    Ok(PremiseOutcome::Pass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composers::gen_scaled_single;
    use crate::periodcore::{extend, PeriodicCycle};
    use proptest::prelude::*;

    #[test]
    fn invariance_for_all_small_periods() {
        for t in 1..=64 {
            let dev = check_relative_invariance(PhaseConfig::new(t).unwrap(), 1000).unwrap();
            assert!(dev < 1e-9, "T = {t}: {dev}");
        }
        assert!(PhaseConfig::new(0).is_err());
        assert!(check_relative_invariance(PhaseConfig::new(4).unwrap(), 0).is_err());
    }

    #[test]
    fn equal_positions_give_a_real_product() {
        let cfg = PhaseConfig::new(7).unwrap();
        let x = Complex64::new(0.3, -0.8);
        let p = cfg.rotate(x, 11) * cfg.rotate(x, 11).conj();
        assert!(p.im.abs() < 1e-15);
        assert!((p.re - x.norm_sqr()).abs() < 1e-15);
    }

    #[test]
    fn counterexample_values() {
        let w = rule_periodicity_counterexample();
        assert_eq!((w.rule_diff_first, w.rule_diff_second), (-1, 2));
        assert!((w.phase_diff_first - w.phase_diff_second).abs() < 1e-12);
        assert_eq!(w.verdict, NOT_REPRESENTABLE);
    }

    #[test]
    fn matched_rule_period_flips_the_verdict() {
        let cfg = PhaseConfig::new(4).unwrap();
        let w = rule_witness(cfg, "a mod 4", |a| a.rem_euclid(4), (0, 1), (8, 9));
        assert!(w.rules_equal && w.phases_equal);
        assert_eq!(w.verdict, REPRESENTABLE);
    }

    #[test]
    fn premise_examples() {
        let periodic: Vec<i64> = extend(&PeriodicCycle::new(vec![1, 2, 3], 10).unwrap(), 12)
            .into_iter()
            .map(i64::from)
            .collect();
        assert_eq!(invariance_premise_test(&periodic, 3).unwrap(), PremiseOutcome::Pass);
        let scaled: Vec<i64> = gen_scaled_single(&PeriodicCycle::new(vec![1, 2], 10).unwrap(), 3, 2)
            .unwrap()
            .into_iter()
            .map(|v| v as i64)
            .collect();
        assert!(matches!(
            invariance_premise_test(&scaled, 2).unwrap(),
            PremiseOutcome::Violation { .. }
        ));
        assert_eq!(invariance_premise_test(&[5; 9], 4).unwrap(), PremiseOutcome::Pass);
        assert!(matches!(invariance_premise_test(&[1, 2, 3], 0), Err(Error::InvalidPeriod(_))));
        assert!(matches!(invariance_premise_test(&[1, 2, 3], 3), Err(Error::InvalidPeriod(_))));
    }

    proptest! {
        #[test]
        fn common_shift_keeps_the_score(t in 1u64..64, m in -500i64..500, n in -500i64..500, d in -500i64..500) {
            let cfg = PhaseConfig::new(t).unwrap();
            let x = Complex64::new(0.6, 0.2);
            let y = Complex64::new(-0.1, 0.9);
            let a = cfg.rotate(x, m) * cfg.rotate(y, n).conj();
            let b = cfg.rotate(x, m + d) * cfg.rotate(y, n + d).conj();
            prop_assert!((a - b).norm() < 1e-9);
        }

        #[test]
        fn periodic_sequences_pass(cycle in prop::collection::vec(0i64..10, 1..8), reps in 2usize..5) {
            let t = cycle.len();
            let seq: Vec<i64> = cycle.iter().copied().cycle().take(t * reps).collect();
            prop_assert_eq!(invariance_premise_test(&seq, t).unwrap(), PremiseOutcome::Pass);
        }
    }
}
