//! Numeric bound shared by the regression and savings arithmetic.
//!
//! Everything there is field arithmetic (no roots, no transcendental
//! functions), so it runs unchanged over `f32`, `f64` and exact rationals.

use std::fmt::Debug;

use num_traits::{FromPrimitive, Num, Signed, ToPrimitive};

pub trait Scalar: Num + Signed + Copy + PartialOrd + FromPrimitive + ToPrimitive + Debug {
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    fn hundred() -> Self {
        Self::from_u8(100).expect("100 representable in scalar type")
    }
}

impl<T> Scalar for T where T: Num + Signed + Copy + PartialOrd + FromPrimitive + ToPrimitive + Debug {}
