//! Scalar abstraction for the numeric core.
//!
//! Everything numeric (tensors, the tape, losses, metrics) is generic over
//! [`Scalar`]; the concrete pipeline uses the `f64` aliases exported from the
//! crate root. 64-bit is the precision of record: file formats store IEEE-754
//! doubles and the finite-difference checks assume double headroom.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar usable throughout the crate.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless-enough conversion from `f64` literals and RNG draws.
    #[inline]
    fn from_f64_lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    /// Clamp floor applied inside every `log` (and to KL inputs).
    #[inline]
    fn eps_log() -> Self {
        Self::from_f64_lit(1e-12)
    }
}

macro_rules! impl_scalar {
    ($($t:ty)*) => {$(
        impl Scalar for $t {}
    )*}
}

impl_scalar!(f32 f64);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eps_log_positive() {
        assert!(f64::eps_log() > 0.0);
        assert!(f32::eps_log() > 0.0);
    }

    #[test]
    fn literal_roundtrip_is_exact_for_f64() {
        assert_eq!(f64::from_f64_lit(0.8500000000000001), 0.8500000000000001);
    }
}
