//! Scalar abstraction. Every numerical routine in this crate is generic over
//! the floating-point type via [`Scalar`]; the crate root pins `f64` aliases,
//! which is what the CLI and the acceptance tolerances are calibrated for.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};

/// Storage width of a tensor payload on disk (CMVT dtype field).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    /// Wire code used in the CMVT header.
    pub fn code(self) -> u32 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point scalar: `f32` or `f64`.
pub trait Scalar: Float + FromPrimitive + Debug + Display + Send + Sync + 'static {
    /// Native storage width of this scalar.
    const DTYPE: DType;

    fn cast(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn cast(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn cast(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}
