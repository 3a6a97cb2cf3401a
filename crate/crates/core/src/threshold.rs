//! Adaptive binarisation threshold.
//!
//! Every labeled pixel contributes one inequality on the threshold `a`:
//! a positive pixel with saliency `v` is satisfied when `v >= a`, a negative
//! pixel when `v < a`. The search returns a threshold that satisfies as many
//! constraints as possible, in `O(m log m)` via sorting and binary search.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Threshold used when no pixel is labeled.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Largest instance accepted by [`brute_force_threshold`].
pub const BRUTE_FORCE_LIMIT: usize = 10_000;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConstraintSet {
    /// Saliency at negative pixels; each needs `a > value`.
    pub ge_values: Vec<f64>,
    /// Saliency at positive pixels; each needs `a <= value`.
    pub le_values: Vec<f64>,
}

impl ConstraintSet {
    /// Collect constraints from a map and its masks; unlabeled pixels are skipped.
    pub fn from_map(values: &[f64], positive: &[u8], negative: &[u8]) -> Self {
        let mut set = ConstraintSet::default();
        set.extend(values, positive, negative);
        set
    }

    pub fn extend(&mut self, values: &[f64], positive: &[u8], negative: &[u8]) {
        for ((&v, &f), &c) in values.iter().zip(positive).zip(negative) {
            if f != 0 {
                self.le_values.push(v);
            } else if c != 0 {
                self.ge_values.push(v);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.ge_values.len() + self.le_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of constraints a threshold satisfies, by direct counting.
    pub fn satisfied_by(&self, a: f64) -> usize {
        self.le_values.iter().filter(|&&v| v >= a).count()
            + self.ge_values.iter().filter(|&&v| v < a).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Threshold {
    pub value: f64,
    pub satisfied: usize,
}

/// Smallest double strictly greater than `v` (finite `v`).
fn next_up(v: f64) -> f64 {
    if v.is_nan() || v == f64::INFINITY {
        return v;
    }
    if v == 0.0 {
        return f64::from_bits(1);
    }
    let bits = v.to_bits();
    f64::from_bits(if v > 0.0 { bits + 1 } else { bits - 1 })
}

fn count_below(sorted: &[f64], v: f64) -> usize {
    sorted.partition_point(|&x| x < v)
}

fn count_at_most(sorted: &[f64], v: f64) -> usize {
    sorted.partition_point(|&x| x <= v)
}

/// Best threshold for a constraint set.
///
/// Candidates are visited in the order negative values ascending, then
/// positive values descending, keeping the first strict improvement. A
/// positive value `v` is itself a candidate (`a = v` satisfies it). A
/// negative value `u` cannot satisfy its own strict constraint, so it stands
/// for the next larger distinct constraint value (or the next double above
/// `u` when it is the largest), which is the smallest threshold that does.
pub fn optimal_threshold(constraints: &ConstraintSet) -> Threshold {
    if constraints.is_empty() {
        return Threshold {
            value: DEFAULT_THRESHOLD,
            satisfied: 0,
        };
    }
    let mut ge = constraints.ge_values.clone();
    let mut le = constraints.le_values.clone();
    ge.sort_by(f64::total_cmp);
    le.sort_by(f64::total_cmp);

    let mut all: Vec<f64> = ge.iter().chain(&le).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();

    let mut best = Threshold {
        value: DEFAULT_THRESHOLD,
        satisfied: 0,
    };
    let mut consider = |value: f64, satisfied: usize| {
        if satisfied > best.satisfied {
            best = Threshold { value, satisfied };
        }
    };

    for &u in &ge {
        // positives strictly above u, negatives at or below u
        let count = (le.len() - count_at_most(&le, u)) + count_at_most(&ge, u);
        let next = all.partition_point(|&x| x <= u);
        let value = all.get(next).copied().unwrap_or_else(|| next_up(u));
        consider(value, count);
    }
    for &v in le.iter().rev() {
        let count = (le.len() - count_below(&le, v)) + count_below(&ge, v);
        consider(v, count);
    }
    best
}

/// Exhaustive reference: tries every constraint value, the next double above
/// every constraint value, and the default threshold.
pub fn brute_force_threshold(constraints: &ConstraintSet) -> Result<Threshold> {
    if constraints.len() > BRUTE_FORCE_LIMIT {
        return Err(Error::TooManyConstraints {
            len: constraints.len(),
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let values = constraints.ge_values.iter().chain(&constraints.le_values);
    let candidates = core::iter::once(DEFAULT_THRESHOLD)
        .chain(values.clone().copied())
        .chain(values.map(|&v| next_up(v)));
    let mut best = Threshold {
        value: DEFAULT_THRESHOLD,
        satisfied: constraints.satisfied_by(DEFAULT_THRESHOLD),
    };
    for a in candidates {
        let satisfied = constraints.satisfied_by(a);
        if satisfied > best.satisfied {
            best = Threshold {
                value: a,
                satisfied,
            };
        }
    }
    Ok(best)
}

impl core::fmt::Display for Threshold {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "a={} ({} satisfied)", self.value, self.satisfied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(le: &[f64], ge: &[f64]) -> ConstraintSet {
        ConstraintSet {
            ge_values: ge.to_vec(),
            le_values: le.to_vec(),
        }
    }

    #[test]
    fn single_positive_constraint() {
        let t = optimal_threshold(&set(&[0.9], &[]));
        assert_eq!(t.value, 0.9);
        assert_eq!(t.satisfied, 1);
        assert_eq!(brute_force_threshold(&set(&[0.9], &[])).unwrap().satisfied, 1);
    }

    #[test]
    fn separable_pixels_all_satisfied() {
        let c = ConstraintSet::from_map(&[0.2, 0.8, 0.6], &[0, 1, 0], &[1, 0, 1]);
        assert_eq!(c.le_values, [0.8]);
        assert_eq!(c.ge_values, [0.2, 0.6]);
        let t = optimal_threshold(&c);
        assert_eq!(c.satisfied_by(t.value), 3);
        assert!(t.value > 0.6 && t.value <= 0.8);
        assert_eq!(brute_force_threshold(&c).unwrap().satisfied, 3);
    }

    #[test]
    fn contradictory_pair_satisfies_one() {
        let c = set(&[0.3], &[0.7]);
        let t = optimal_threshold(&c);
        assert_eq!(t.satisfied, 1);
        assert_eq!(c.satisfied_by(t.value), 1);
        assert_eq!(brute_force_threshold(&c).unwrap().satisfied, 1);
    }

    #[test]
    fn empty_set_uses_default() {
        let t = optimal_threshold(&ConstraintSet::default());
        assert_eq!((t.value, t.satisfied), (0.5, 0));
        let b = brute_force_threshold(&ConstraintSet::default()).unwrap();
        assert_eq!((b.value, b.satisfied), (0.5, 0));
    }

    #[test]
    fn negative_only_goes_above_the_largest() {
        let c = set(&[], &[0.1, 0.4, 1.0]);
        let t = optimal_threshold(&c);
        assert_eq!(t.satisfied, 3);
        assert!(t.value > 1.0);
    }

    #[test]
    fn ties_between_positive_and_negative_values() {
        let c = set(&[0.5, 0.5, 0.2], &[0.5, 0.2]);
        let t = optimal_threshold(&c);
        assert_eq!(c.satisfied_by(t.value), t.satisfied);
        assert_eq!(t.satisfied, brute_force_threshold(&c).unwrap().satisfied);
    }

    #[test]
    fn brute_force_size_limit() {
        let c = set(&vec![0.1; BRUTE_FORCE_LIMIT + 1], &[]);
        assert!(matches!(
            brute_force_threshold(&c),
            Err(Error::TooManyConstraints { .. })
        ));
    }

    #[test]
    fn agrees_with_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let m = rng.gen_range(0..=64);
            let mut c = ConstraintSet::default();
            for _ in 0..m {
                // coarse grid so ties are common
                let v = rng.gen_range(0..20) as f64 / 19.0;
                if rng.gen_bool(0.5) {
                    c.le_values.push(v);
                } else {
                    c.ge_values.push(v);
                }
            }
            let fast = optimal_threshold(&c);
            let slow = brute_force_threshold(&c).unwrap();
            assert_eq!(fast.satisfied, slow.satisfied);
            assert_eq!(c.satisfied_by(fast.value), fast.satisfied);
        }
    }

    proptest! {
        #[test]
        fn count_is_optimal_and_order_independent(
            le in proptest::collection::vec(0.0f64..1.0, 0..40),
            ge in proptest::collection::vec(0.0f64..1.0, 0..40),
            rotate in 0usize..40,
        ) {
            let c = set(&le, &ge);
            let t = optimal_threshold(&c);
            prop_assert_eq!(c.satisfied_by(t.value), t.satisfied);
            prop_assert_eq!(t.satisfied, brute_force_threshold(&c).unwrap().satisfied);
            let mut le2 = le.clone();
            let mut ge2 = ge.clone();
            if !le2.is_empty() { let k = rotate % le2.len(); le2.rotate_left(k); }
            ge2.reverse();
            prop_assert_eq!(optimal_threshold(&set(&le2, &ge2)), t);
        }
    }
}
