//! Exact ratios of counts.
//!
//! Coverage, redundancy, metric scores and the ladder statistics are all
//! ratios of small counts. They are kept as (numerator, denominator) pairs so
//! that reports can be recomputed and compared without floating point drift.
//! Serialized form carries both parts plus a decimal rendered at four places.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fraction {
    numerator: u64,
    denominator: u64,
}

impl Fraction {
    /// `None` when the denominator is zero.
    pub fn new(numerator: u64, denominator: u64) -> Option<Self> {
        (denominator != 0).then_some(Self {
            numerator,
            denominator,
        })
    }

    pub const ZERO: Fraction = Fraction {
        numerator: 0,
        denominator: 1,
    };

    pub const ONE: Fraction = Fraction {
        numerator: 1,
        denominator: 1,
    };

    pub fn numerator(&self) -> u64 {
        self.numerator
    }

    pub fn denominator(&self) -> u64 {
        self.denominator
    }

    pub fn to_f64(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }

    /// Decimal rendering with four places, round half up.
    pub fn render(&self) -> String {
        let scaled = (self.numerator as u128 * 10_000 * 2 + self.denominator as u128)
            / (self.denominator as u128 * 2);
        format!("{}.{:04}", scaled / 10_000, scaled % 10_000)
    }

    pub fn reduced(&self) -> Self {
        let g = gcd(self.numerator, self.denominator);
        Self {
            numerator: self.numerator / g,
            denominator: self.denominator / g,
        }
    }

    /// Value comparison (2/4 and 1/2 compare equal).
    pub fn cmp_value(&self, other: &Fraction) -> Ordering {
        let lhs = self.numerator as u128 * other.denominator as u128;
        let rhs = other.numerator as u128 * self.denominator as u128;
        lhs.cmp(&rhs)
    }

    pub fn same_value(&self, other: &Fraction) -> bool {
        self.cmp_value(other) == Ordering::Equal
    }

    pub fn checked_add(&self, other: &Fraction) -> Option<Fraction> {
        let num = self.numerator as u128 * other.denominator as u128
            + other.numerator as u128 * self.denominator as u128;
        let den = self.denominator as u128 * other.denominator as u128;
        reduce_u128(num, den)
    }

    pub fn checked_sub(&self, other: &Fraction) -> Option<Fraction> {
        let lhs = self.numerator as u128 * other.denominator as u128;
        let rhs = other.numerator as u128 * self.denominator as u128;
        let den = self.denominator as u128 * other.denominator as u128;
        reduce_u128(lhs.checked_sub(rhs)?, den)
    }

    pub fn checked_div_count(&self, count: u64) -> Option<Fraction> {
        if count == 0 {
            return None;
        }
        reduce_u128(
            self.numerator as u128,
            self.denominator as u128 * count as u128,
        )
    }

    /// Mean of a non-empty list, reduced.
    pub fn mean(values: &[Fraction]) -> Option<Fraction> {
        let mut total = Fraction::ZERO;
        for v in values {
            total = total.checked_add(v)?;
        }
        total.checked_div_count(values.len() as u64)
    }

    /// Parts-per-million approximation of a non-negative decimal, used for
    /// band and tolerance parameters read from config.
    pub fn from_decimal(value: f64) -> Option<Fraction> {
        if !value.is_finite() || value < 0.0 {
            return None;
        }
        let ppm = (value * 1_000_000.0).round() as u64;
        Fraction::new(ppm, 1_000_000).map(|f| f.reduced())
    }
}

fn reduce_u128(num: u128, den: u128) -> Option<Fraction> {
    if den == 0 {
        return None;
    }
    let g = gcd_u128(num, den);
    let (n, d) = (num / g, den / g);
    Some(Fraction {
        numerator: u64::try_from(n).ok()?,
        denominator: u64::try_from(d).ok()?,
    })
}

fn gcd(a: u64, b: u64) -> u64 {
    gcd_u128(a as u128, b as u128) as u64
}

fn gcd_u128(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a.max(1)
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numerator, self.denominator)
    }
}

#[derive(Serialize, Deserialize)]
struct FractionRepr {
    numerator: u64,
    denominator: u64,
    #[serde(default)]
    value: serde_json::Value,
}

impl Serialize for Fraction {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let rendered: f64 = self.render().parse().unwrap_or(0.0);
        FractionRepr {
            numerator: self.numerator,
            denominator: self.denominator,
            value: serde_json::Value::from(rendered),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = FractionRepr::deserialize(deserializer)?;
        Fraction::new(repr.numerator, repr.denominator)
            .ok_or_else(|| serde::de::Error::custom("fraction denominator is zero"))
    }
}
