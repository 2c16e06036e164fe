//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Additive value used in place of −∞ inside attention masks. Any mask entry
/// at or below [`Scalar::mask_threshold`] is treated as blocked and produces an
/// exact zero after softmax.
pub const MASK_SENTINEL: f64 = -1e30;

/// f32 / f64 element type of a [`crate::Tensor`].
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Checkpoint dtype tag (0 = f32, 1 = f64).
    const DTYPE: u8;
    const NAME: &'static str;

    fn from_f64_lossy(v: f64) -> Self;

    fn c(v: f64) -> Self {
        Self::from_f64_lossy(v)
    }

    fn from_usize_lossy(v: usize) -> Self {
        Self::from_f64_lossy(v as f64)
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn mask_sentinel() -> Self {
        Self::from_f64_lossy(MASK_SENTINEL)
    }

    fn mask_threshold() -> Self {
        Self::from_f64_lossy(MASK_SENTINEL / 10.0)
    }

    /// tanh used by GELU. Defaults to the library function.
    #[inline]
    fn act_tanh(self) -> Self {
        self.tanh()
    }

    /// Little-endian bytes, used by the binary file formats.
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

/// Branch-free rational tanh for f32 (odd 13/6 minimax fit, clamped), within
/// a few ulp of `f32::tanh` and vectorizable.
#[inline]
pub fn tanh_f32(x: f32) -> f32 {
    const CLAMP: f32 = 7.905_311;
    const A: [f32; 7] = [
        4.893_524_6e-3,
        6.372_619_3e-4,
        1.485_722_4e-5,
        5.122_297e-8,
        -8.604_672e-11,
        2.000_188e-13,
        -2.760_768_4e-16,
    ];
    const B: [f32; 4] = [4.893_525_2e-3, 2.268_434_6e-3, 1.185_347_1e-4, 1.198_258_4e-6];
    let x = x.clamp(-CLAMP, CLAMP);
    let x2 = x * x;
    let mut p = A[6];
    for &a in A[..6].iter().rev() {
        p = p * x2 + a;
    }
    let mut q = B[3];
    for &b in B[..3].iter().rev() {
        q = q * x2 + b;
    }
    x * p / q
}

impl Scalar for f32 {
    const DTYPE: u8 = 0;
    const NAME: &'static str = "f32";

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn act_tanh(self) -> Self {
        tanh_f32(self)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: u8 = 1;
    const NAME: &'static str = "f64";

    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

pub fn dtype_width(dtype: u8) -> Option<usize> {
    match dtype {
        0 => Some(4),
        1 => Some(8),
        _ => None,
    }
}
