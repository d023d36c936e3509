//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar the volumes, flows and networks are generic over.
///
/// Implemented for `f32` (training, serving) and `f64` (gradient checks).
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, used for literals.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("usize representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn to_f32_lossy(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Sine and cosine of an angle in degrees, exact at multiples of 90°.
pub fn sin_cos_deg<T: Real>(degrees: T) -> (T, T) {
    let full = T::lit(360.0);
    let mut a = degrees % full;
    if a < T::zero() {
        a += full;
    }
    let quarter = T::lit(90.0);
    if (a / quarter).fract() == T::zero() {
        return match (a / quarter).to_usize().unwrap_or(0) % 4 {
            0 => (T::zero(), T::one()),
            1 => (T::one(), T::zero()),
            2 => (T::zero(), -T::one()),
            _ => (-T::one(), T::zero()),
        };
    }
    a.to_radians().sin_cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn right_angles_are_exact() {
        assert_eq!(sin_cos_deg(90.0f64), (1.0, 0.0));
        assert_eq!(sin_cos_deg(-90.0f64), (-1.0, 0.0));
        assert_eq!(sin_cos_deg(180.0f32), (0.0, -1.0));
        assert_eq!(sin_cos_deg(720.0f64), (0.0, 1.0));
    }

    #[test]
    fn other_angles_match_std() {
        let (s, c) = sin_cos_deg(30.0f64);
        assert!((s - 0.5).abs() < 1e-15);
        assert!((c - 3f64.sqrt() / 2.0).abs() < 1e-15);
    }
}
