//! Float dtype conversion to and from the F32 working precision.
//!
//! Widening (F16/BF16 → F32, F32 → F64) is exact. Narrowing rounds to
//! nearest, ties to even. NaNs narrowed to 16-bit types become the canonical
//! quiet NaN of the target type.

use half::{bf16, f16};

use super::{DType, TensorBlock};
use crate::error::{Error, Result};

pub const BF16_CANONICAL_NAN: u16 = 0x7FC0;
pub const F16_CANONICAL_NAN: u16 = 0x7E00;

pub fn bf16_bits_from_f32(x: f32) -> u16 {
    if x.is_nan() {
        BF16_CANONICAL_NAN
    } else {
        bf16::from_f32(x).to_bits()
    }
}

pub fn f16_bits_from_f32(x: f32) -> u16 {
    if x.is_nan() {
        F16_CANONICAL_NAN
    } else {
        f16::from_f32(x).to_bits()
    }
}

fn require_float(dtype: DType) -> Result<()> {
    if dtype.is_float() {
        Ok(())
    } else {
        Err(Error::NonFloatDType(dtype))
    }
}

/// Decodes `bytes` of the given float dtype into `out`, which must hold exactly
/// `bytes.len() / dtype.width()` elements.
pub fn decode_f32_into(bytes: &[u8], dtype: DType, out: &mut [f32]) -> Result<()> {
    require_float(dtype)?;
    let width = dtype.width();
    debug_assert_eq!(bytes.len(), out.len() * width);
    let chunks = bytes.chunks_exact(width).zip(out.iter_mut());
    match dtype {
        DType::F32 => chunks.for_each(|(b, o)| *o = f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
        DType::F16 => chunks.for_each(|(b, o)| *o = f16::from_le_bytes([b[0], b[1]]).to_f32()),
        DType::BF16 => chunks.for_each(|(b, o)| *o = bf16::from_le_bytes([b[0], b[1]]).to_f32()),
        DType::F64 => chunks
            .for_each(|(b, o)| *o = f64::from_le_bytes(b.try_into().expect("8-byte chunk")) as f32),
        _ => unreachable!("checked by require_float"),
    }
    Ok(())
}

/// Encodes `values` into `out` in the given float dtype; `out` must be exactly
/// `values.len() * dtype.width()` bytes.
pub fn encode_f32_into(values: &[f32], dtype: DType, out: &mut [u8]) -> Result<()> {
    require_float(dtype)?;
    let width = dtype.width();
    debug_assert_eq!(out.len(), values.len() * width);
    let chunks = out.chunks_exact_mut(width).zip(values.iter());
    match dtype {
        DType::F32 => chunks.for_each(|(o, v)| o.copy_from_slice(&v.to_le_bytes())),
        DType::F16 => {
            chunks.for_each(|(o, v)| o.copy_from_slice(&f16_bits_from_f32(*v).to_le_bytes()))
        }
        DType::BF16 => {
            chunks.for_each(|(o, v)| o.copy_from_slice(&bf16_bits_from_f32(*v).to_le_bytes()))
        }
        DType::F64 => chunks.for_each(|(o, v)| o.copy_from_slice(&f64::from(*v).to_le_bytes())),
        _ => unreachable!("checked by require_float"),
    }
    Ok(())
}

pub fn decode_f32(block: &TensorBlock) -> Result<Vec<f32>> {
    require_float(block.meta.dtype)?;
    let mut out = vec![0f32; block.data.len() / block.meta.dtype.width()];
    decode_f32_into(&block.data, block.meta.dtype, &mut out)?;
    Ok(out)
}

pub fn encode_from_f32(values: &[f32], dtype: DType) -> Result<Vec<u8>> {
    require_float(dtype)?;
    let mut out = vec![0u8; values.len() * dtype.width()];
    encode_f32_into(values, dtype, &mut out)?;
    Ok(out)
}
