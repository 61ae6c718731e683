//! Group actions on finite periodic sequences.
//!
//! Sequences are handled through their fundamental cycle. The shift
//! generator acts as `(g^k · f)(t) = f(t - k)`; the modulo generator acts on
//! values as `x ↦ x + 1 (mod p)`. The composite action of the direct product
//! moves a rule index and offsets the value it produces.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BASE: u32 = 10;

/// One fundamental cycle of symbols in `[0, base)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PeriodicCycle {
    values: Vec<u32>,
    base: u32,
}

impl PeriodicCycle {
    pub fn new(values: Vec<u32>, base: u32) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidCycle("cycle must be non-empty".into()));
        }
        if base == 0 {
            return Err(Error::InvalidCycle("base must be positive".into()));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, &v)| v >= base) {
            return Err(Error::InvalidValue(format!(
                "cycle value {v} at index {i} is outside [0, {base})"
            )));
        }
        Ok(Self { values, base })
    }

    /// A base-10 cycle.
    pub fn digits(values: &[u32]) -> Result<Self> {
        Self::new(values.to_vec(), DEFAULT_BASE)
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn base(&self) -> u32 {
        self.base
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value at any integer time, by periodic extension.
    pub fn at(&self, t: i64) -> u32 {
        let n = self.values.len() as i64;
        self.values[t.rem_euclid(n) as usize]
    }
}

/// Power `k` of the shift generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftPower(pub i64);

/// Power `j` of the modulo generator of `Z_p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuloPower {
    j: i64,
    p: u32,
}

impl ModuloPower {
    pub fn new(j: i64, p: u32) -> Result<Self> {
        if p < 2 {
            return Err(Error::InvalidSpec(format!("modulus must be >= 2, got {p}")));
        }
        Ok(Self { j, p })
    }

    pub fn exponent(&self) -> i64 {
        self.j
    }

    pub fn modulus(&self) -> u32 {
        self.p
    }
}

/// An element `(τ^i, σ^j)` of the direct product of the shift and modulo groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositeAction {
    pub shift: ShiftPower,
    pub modulo: ModuloPower,
}

impl CompositeAction {
    pub fn new(i: i64, j: i64, p: u32) -> Result<Self> {
        Ok(Self {
            shift: ShiftPower(i),
            modulo: ModuloPower::new(j, p)?,
        })
    }

    /// Group product; both factors are abelian so the order is irrelevant.
    pub fn then(&self, other: &CompositeAction) -> Result<CompositeAction> {
        if self.modulo.p != other.modulo.p {
            return Err(Error::InvalidSpec(format!(
                "cannot compose actions over Z_{} and Z_{}",
                self.modulo.p, other.modulo.p
            )));
        }
        CompositeAction::new(
            self.shift.0 + other.shift.0,
            self.modulo.j + other.modulo.j,
            self.modulo.p,
        )
    }
}

/// Smallest `d` dividing the cycle length with `values[i] == values[i mod d]`.
pub fn minimal_period(cycle: &PeriodicCycle) -> usize {
    minimal_period_of(cycle.values()).expect("PeriodicCycle is never empty")
}

/// [`minimal_period`] for a raw slice treated as one fundamental cycle.
pub fn minimal_period_of<T: PartialEq>(values: &[T]) -> Result<usize> {
    let n = values.len();
    if n == 0 {
        return Err(Error::InvalidCycle("cannot take the period of an empty cycle".into()));
    }
    let found = (1..=n)
        .filter(|d| n.is_multiple_of(*d))
        .find(|&d| (d..n).all(|i| values[i] == values[i - d]))
        .unwrap_or(n);
    Ok(found)
}

pub fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let r = a % b;
        a = b;
        b = r;
    }
    a
}

/// Least common multiple of two positive integers.
pub fn lcm(a: i64, b: i64) -> Result<i64> {
    if a < 1 || b < 1 {
        return Err(Error::InvalidPeriod(format!(
            "lcm needs positive arguments, got ({a}, {b})"
        )));
    }
    let g = gcd(a as u64, b as u64) as i64;
    Ok(a / g * b)
}

/// `lcm` for periods already known to be positive.
pub fn lcm_usize(a: usize, b: usize) -> usize {
    a / gcd(a as u64, b as u64) as usize * b
}

/// The first `length` values of the periodic extension of `cycle`.
pub fn extend(cycle: &PeriodicCycle, length: usize) -> Vec<u32> {
    cycle.values().iter().copied().cycle().take(length).collect()
}

/// Apply `g^k` to a sequence treated as periodic: `out[t] = seq[(t - k) mod n]`.
pub fn shift_apply<T: Copy>(seq: &[T], power: ShiftPower) -> Result<Vec<T>> {
    let n = seq.len() as i64;
    if n == 0 {
        return Err(Error::InvalidCycle("cannot shift an empty sequence".into()));
    }
    Ok((0..n).map(|t| seq[(t - power.0).rem_euclid(n) as usize]).collect())
}

/// Induced action of `(τ^i, σ^j)` on a rule index `position` and the value
/// it yields: `(position - i, (value + j) mod p)`.
pub fn composite_act(action: &CompositeAction, position: i64, value: i64) -> Result<(i64, i64)> {
    let p = action.modulo.p as i64;
    if !(0..p).contains(&value) {
        return Err(Error::InvalidValue(format!("value {value} is outside [0, {p})")));
    }
    Ok((
        position - action.shift.0,
        (value + action.modulo.j).rem_euclid(p),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cyc(v: &[u32]) -> PeriodicCycle {
        PeriodicCycle::digits(v).unwrap()
    }

    /// Smallest shift that maps the extended sequence onto itself, found by
    /// sliding a window rather than by divisor search.
    fn sliding_period(seq: &[u32]) -> usize {
        (1..=seq.len())
            .find(|&d| seq.iter().zip(&seq[d..]).all(|(a, b)| a == b))
            .unwrap()
    }

    #[test]
    fn minimal_period_examples() {
        assert_eq!(minimal_period(&cyc(&[1, 2, 1, 2])), 2);
        assert_eq!(minimal_period(&cyc(&[9, 5, 5, 8, 8, 4])), 6);
        assert_eq!(minimal_period(&cyc(&[7, 7, 7])), 1);
    }

    #[test]
    fn empty_cycle_rejected() {
        assert!(matches!(
            PeriodicCycle::digits(&[]),
            Err(Error::InvalidCycle(_))
        ));
        assert!(matches!(
            minimal_period_of::<u32>(&[]),
            Err(Error::InvalidCycle(_))
        ));
        assert!(matches!(
            shift_apply::<u32>(&[], ShiftPower(1)),
            Err(Error::InvalidCycle(_))
        ));
    }

    #[test]
    fn out_of_base_rejected() {
        assert!(matches!(
            PeriodicCycle::new(vec![1, 10], 10),
            Err(Error::InvalidValue(_))
        ));
    }

    #[test]
    fn lcm_examples() {
        assert_eq!(lcm(3, 2).unwrap(), 6);
        assert_eq!(lcm(4, 4).unwrap(), 4);
        assert_eq!(lcm(13, 16).unwrap(), 208);
        assert!(matches!(lcm(0, 3), Err(Error::InvalidPeriod(_))));
        assert!(matches!(lcm(3, -1), Err(Error::InvalidPeriod(_))));
    }

    #[test]
    fn extend_examples() {
        assert_eq!(extend(&cyc(&[1, 2, 3]), 6), vec![1, 2, 3, 1, 2, 3]);
        assert_eq!(extend(&cyc(&[1, 2]), 5), vec![1, 2, 1, 2, 1]);
        assert_eq!(extend(&cyc(&[5]), 3), vec![5, 5, 5]);
    }

    #[test]
    fn shift_examples() {
        let s = [1u32, 2, 3];
        assert_eq!(shift_apply(&s, ShiftPower(3)).unwrap(), vec![1, 2, 3]);
        assert_eq!(shift_apply(&s, ShiftPower(1)).unwrap(), vec![3, 1, 2]);
        assert_eq!(shift_apply(&s, ShiftPower(0)).unwrap(), vec![1, 2, 3]);
        assert_eq!(shift_apply(&s, ShiftPower(-1)).unwrap(), vec![2, 3, 1]);
    }

    #[test]
    fn composite_examples() {
        let id = CompositeAction::new(0, 0, 10).unwrap();
        assert_eq!(composite_act(&id, 5, 3).unwrap(), (5, 3));
        let a = CompositeAction::new(2, 3, 10).unwrap();
        assert_eq!(composite_act(&a, 5, 9).unwrap(), (3, 2));
        let b = CompositeAction::new(-1, 10, 10).unwrap();
        assert_eq!(composite_act(&b, 0, 4).unwrap(), (1, 4));
        assert!(matches!(
            composite_act(&id, 0, 10),
            Err(Error::InvalidValue(_))
        ));
        assert!(ModuloPower::new(1, 1).is_err());
    }

    fn cycle_strategy() -> impl Strategy<Value = Vec<u32>> {
        prop::collection::vec(0u32..10, 1..24)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn period_divides_length_and_fixes_extension(values in cycle_strategy(), reps in 1usize..4) {
            let c = cyc(&values);
            let d = minimal_period(&c);
            prop_assert_eq!(c.len() % d, 0);
            let ext = extend(&c, reps * d);
            prop_assert_eq!(shift_apply(&ext, ShiftPower(d as i64)).unwrap(), ext.clone());
            // Independent oracle on a long extension.
            let long = extend(&c, 3 * c.len());
            prop_assert_eq!(sliding_period(&long), d);
        }

        #[test]
        fn shift_is_a_group_action(values in cycle_strategy(), a in -40i64..40, b in -40i64..40) {
            let once = shift_apply(&shift_apply(&values, ShiftPower(a)).unwrap(), ShiftPower(b)).unwrap();
            prop_assert_eq!(once, shift_apply(&values, ShiftPower(a + b)).unwrap());
            prop_assert_eq!(shift_apply(&values, ShiftPower(0)).unwrap(), values);
        }

        #[test]
        fn sigma_has_order_p(p in 2u32..20, k in -50i64..50, v in 0i64..20) {
            let v = v % p as i64;
            let full = CompositeAction::new(0, p as i64, p).unwrap();
            let id = CompositeAction::new(0, 0, p).unwrap();
            prop_assert_eq!(composite_act(&full, k, v).unwrap(), composite_act(&id, k, v).unwrap());
        }

        #[test]
        fn composite_action_composes(i1 in -9i64..9, j1 in -30i64..30, i2 in -9i64..9, j2 in -30i64..30,
                                     k in -20i64..20, v in 0i64..10) {
            let a = CompositeAction::new(i1, j1, 10).unwrap();
            let b = CompositeAction::new(i2, j2, 10).unwrap();
            let (k1, v1) = composite_act(&a, k, v).unwrap();
            let two_step = composite_act(&b, k1, v1).unwrap();
            prop_assert_eq!(two_step, composite_act(&a.then(&b).unwrap(), k, v).unwrap());
        }

        #[test]
        fn lcm_laws(a in 1i64..=64, b in 1i64..=64) {
            prop_assert_eq!(lcm(a, b).unwrap(), lcm(b, a).unwrap());
            prop_assert_eq!(lcm(a, b).unwrap() * gcd(a as u64, b as u64) as i64, a * b);
        }
    }
}
