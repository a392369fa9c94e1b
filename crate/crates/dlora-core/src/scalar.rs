//! Floating-point abstraction so every kernel is written once and runs in
//! either 32-bit (training default) or 64-bit (gradient-check) precision.
//!
//! All transcendental functions go through `libm` rather than the intrinsics
//! so results do not depend on the platform libm or on whether `std` is
//! linked. That keeps training traces bit-reproducible.

use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Element type tag as it appears in the wire encoding and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub trait Scalar:
    Copy
    + Debug
    + Display
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    const DTYPE: Dtype;
    const ZERO: Self;
    const ONE: Self;
    const WIRE_SIZE: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    /// Nearest integer, ties away from zero.
    fn round_ties_away(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;

    fn write_le(self, out: &mut alloc::vec::Vec<u8>);
    /// Reads `Self::WIRE_SIZE` bytes; caller guarantees the slice is long enough.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const WIRE_SIZE: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn exp(self) -> Self {
        libm::expf(self)
    }

    fn ln(self) -> Self {
        libm::logf(self)
    }

    fn sqrt(self) -> Self {
        libm::sqrtf(self)
    }

    fn round_ties_away(self) -> Self {
        libm::roundf(self)
    }

    fn abs(self) -> Self {
        libm::fabsf(self)
    }

    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }

    fn write_le(self, out: &mut alloc::vec::Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const WIRE_SIZE: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn exp(self) -> Self {
        libm::exp(self)
    }

    fn ln(self) -> Self {
        libm::log(self)
    }

    fn sqrt(self) -> Self {
        libm::sqrt(self)
    }

    fn round_ties_away(self) -> Self {
        libm::round(self)
    }

    fn abs(self) -> Self {
        libm::fabs(self)
    }

    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }

    fn write_le(self, out: &mut alloc::vec::Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

/// x·σ(x), the activation used by the backbone MLP and the serial adapters.
pub fn silu<S: Scalar>(x: S) -> S {
    x / (S::ONE + (-x).exp())
}

/// d/dx of `silu`: σ(x)·(1 + x·(1 − σ(x))).
pub fn silu_grad<S: Scalar>(x: S) -> S {
    let sig = S::ONE / (S::ONE + (-x).exp());
    sig * (S::ONE + x * (S::ONE - sig))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dtype_codes_are_stable() {
        assert_eq!(Dtype::F32.code(), 0);
        assert_eq!(Dtype::F64.code(), 1);
    }

    #[test]
    fn round_ties_away_from_zero() {
        assert_eq!(0.5f32.round_ties_away(), 1.0);
        assert_eq!((-0.5f32).round_ties_away(), -1.0);
        assert_eq!(63.5f64.round_ties_away(), 64.0);
        assert_eq!(2.4f64.round_ties_away(), 2.0);
    }

    #[test]
    fn silu_matches_definition() {
        let x = 2.0f64;
        let sigma = 1.0 / (1.0 + (-x).exp());
        assert!((silu(x) - x * sigma).abs() < 1e-15);

        // Central finite difference against the analytic derivative.
        let h = 1e-6;
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.0] {
            let num = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((silu_grad(x) - num).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn wire_roundtrip_is_bit_exact() {
        let mut buf = alloc::vec::Vec::new();
        (-0.0f32).write_le(&mut buf);
        1.5e-40f32.write_le(&mut buf); // subnormal survives too
        assert_eq!(f32::read_le(&buf[0..4]).to_bits(), (-0.0f32).to_bits());
        assert_eq!(f32::read_le(&buf[4..8]).to_bits(), 1.5e-40f32.to_bits());
    }
}
