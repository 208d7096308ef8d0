//! Scalar abstraction over the two supported float widths.
//!
//! Training runs in f32 for speed; gradient checks and the numeric oracles
//! run in f64 where central differences are trustworthy.

use std::fmt::{Debug, Display};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            DType::F32 => 32,
            DType::F64 => 64,
        }
    }
}

impl Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.bits())
    }
}

/// Float element of a tensor. Implemented for `f32` and `f64` only.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// Relative pivot tolerance for Cholesky: pivots below
    /// `PIVOT_RTOL * max_diag` count as non-positive so that rank-deficient
    /// matrices fail deterministically instead of on rounding noise.
    const PIVOT_RTOL: f64;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
    fn byte_width() -> usize;

    /// SIMD-dispatched GEMM tile; see `numerics::gemm` for the layout.
    fn microkernel(k: usize, ap: &[Self], bp: &[Self], out: &mut [Self]);
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    const PIVOT_RTOL: f64 = 1e-6;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
    fn byte_width() -> usize {
        4
    }
    fn microkernel(k: usize, ap: &[f32], bp: &[f32], out: &mut [f32]) {
        crate::numerics::gemm::microkernel_f32(k, ap, bp, out);
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    const PIVOT_RTOL: f64 = 1e-12;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
    fn byte_width() -> usize {
        8
    }
    fn microkernel(k: usize, ap: &[f64], bp: &[f64], out: &mut [f64]) {
        crate::numerics::gemm::microkernel_f64(k, ap, bp, out);
    }
}
