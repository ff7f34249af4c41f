use std::fmt::Debug;

use num_traits::{Num, ToPrimitive};

/// Exact rational scalar.
pub type Rational = num_rational::Ratio<i64>;

/// Numeric type the reward and metric formulas are evaluated in.
///
/// Only field operations and ordering are needed, so exact rationals work
/// alongside the usual floats.
pub trait Scalar: Num + Copy + PartialOrd + Debug + ToPrimitive + Send + Sync {
    fn from_count(n: u64) -> Self;

    fn from_ratio(numer: u64, denom: u64) -> Self {
        Self::from_count(numer) / Self::from_count(denom)
    }

    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
}

macro_rules! float_scalar {
    ($($t:ty)*) => ($(
        impl Scalar for $t {
            fn from_count(n: u64) -> Self {
                n as $t
            }
        }
    )*)
}

float_scalar!(f32 f64);

impl Scalar for Rational {
    fn from_count(n: u64) -> Self {
        Rational::from_integer(i64::try_from(n).expect("count exceeds i64 range"))
    }

    fn from_ratio(numer: u64, denom: u64) -> Self {
        Rational::new(
            i64::try_from(numer).expect("count exceeds i64 range"),
            i64::try_from(denom).expect("count exceeds i64 range"),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_construction_matches_division() {
        assert_eq!(Rational::from_ratio(3, 20), Rational::new(3, 20));
        assert_eq!(f64::from_ratio(1, 4), 0.25);
        assert_eq!(Rational::from_count(2).max_of(Rational::from_count(5)), Rational::from_integer(5));
    }
}
