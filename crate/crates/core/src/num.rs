//! Scalar abstraction shared by the numerical modules.

use nalgebra as na;
use num_traits as nt;

/// Floating point scalar usable by the geodesy, solver, filter and network code.
///
/// Implemented for `f32` and `f64`. The pipeline itself runs in `f64`; see the
/// aliases at the crate root.
pub trait Real:
    Copy + na::RealField + na::Scalar + nt::FloatConst + nt::FromPrimitive + nt::ToPrimitive
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as nt::FromPrimitive>::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        nt::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize(n: usize) -> Self {
        <Self as nt::FromPrimitive>::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn to_radians(self) -> Self {
        self * Self::pi() / Self::lit(180.0)
    }

    #[inline]
    fn to_degrees(self) -> Self {
        self * Self::lit(180.0) / Self::pi()
    }

    #[inline]
    fn is_finite_value(self) -> bool {
        self.as_f64().is_finite()
    }
}

impl Real for f32 {}
impl Real for f64 {}
