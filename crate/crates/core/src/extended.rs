//! Nonnegative extended reals with an explicit infinity.

use std::fmt;
use std::ops::Add;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ExtReal {
    Finite(f64),
    Infinite,
}

impl ExtReal {
    pub const ZERO: ExtReal = ExtReal::Finite(0.0);

    pub fn is_finite(self) -> bool {
        matches!(self, ExtReal::Finite(_))
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            ExtReal::Finite(x) => Some(x),
            ExtReal::Infinite => None,
        }
    }

    /// Lossy view for printing and plotting.
    pub fn to_f64(self) -> f64 {
        self.finite().unwrap_or(f64::INFINITY)
    }

    /// Panics on the infinite value; for code paths where infinity is a bug.
    pub fn expect_finite(self, what: &str) -> f64 {
        self.finite()
            .unwrap_or_else(|| panic!("{what}: expected a finite value"))
    }

    pub fn le(self, other: ExtReal) -> bool {
        match (self, other) {
            (_, ExtReal::Infinite) => true,
            (ExtReal::Infinite, ExtReal::Finite(_)) => false,
            (ExtReal::Finite(a), ExtReal::Finite(b)) => a <= b,
        }
    }

    pub fn min(self, other: ExtReal) -> ExtReal {
        if self.le(other) {
            self
        } else {
            other
        }
    }
}

impl Add for ExtReal {
    type Output = ExtReal;
    fn add(self, rhs: ExtReal) -> ExtReal {
        match (self, rhs) {
            (ExtReal::Finite(a), ExtReal::Finite(b)) => ExtReal::Finite(a + b),
            _ => ExtReal::Infinite,
        }
    }
}

impl std::iter::Sum for ExtReal {
    fn sum<I: Iterator<Item = ExtReal>>(iter: I) -> ExtReal {
        iter.fold(ExtReal::ZERO, |a, b| a + b)
    }
}

impl From<f64> for ExtReal {
    fn from(x: f64) -> Self {
        ExtReal::Finite(x)
    }
}

impl fmt::Display for ExtReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtReal::Finite(x) => write!(f, "{x:.16e}"),
            ExtReal::Infinite => write!(f, "inf"),
        }
    }
}
