//! Reader and writer for the tensor container format.
//!
//! A container file is an 8-byte little-endian header length `N`, followed by
//! `N` bytes of JSON describing every tensor (`dtype`, `shape`,
//! `data_offsets`), followed by the raw little-endian data region. Large
//! checkpoints are split into `model-XXXXX-of-YYYYY.safetensors` shards plus
//! an index document whose `weight_map` names the shard holding each tensor.

mod convert;
mod reader;
mod writer;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use convert::{
    bf16_bits_from_f32, decode_f32, decode_f32_into, encode_f32_into, encode_from_f32,
    f16_bits_from_f32, BF16_CANONICAL_NAN, F16_CANONICAL_NAN,
};
pub use reader::{open_checkpoint, CheckpointHandle, ShardFile};
pub use writer::{write_blocks, write_checkpoint, TensorSpec, WriteOptions, INDEX_FILE_NAME};

/// Element type of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DType {
    F64,
    F32,
    F16,
    BF16,
    I64,
    I32,
    I16,
    I8,
    U8,
    BOOL,
}

impl DType {
    pub const ALL: [DType; 10] = [
        DType::F64,
        DType::F32,
        DType::F16,
        DType::BF16,
        DType::I64,
        DType::I32,
        DType::I16,
        DType::I8,
        DType::U8,
        DType::BOOL,
    ];

    /// Bytes per element.
    pub const fn width(self) -> usize {
        match self {
            DType::F64 | DType::I64 => 8,
            DType::F32 | DType::I32 => 4,
            DType::F16 | DType::BF16 | DType::I16 => 2,
            DType::I8 | DType::U8 | DType::BOOL => 1,
        }
    }

    pub const fn is_float(self) -> bool {
        matches!(self, DType::F64 | DType::F32 | DType::F16 | DType::BF16)
    }

    pub const fn as_str(self) -> &'static str {
        match self {
            DType::F64 => "F64",
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
            DType::I64 => "I64",
            DType::I32 => "I32",
            DType::I16 => "I16",
            DType::I8 => "I8",
            DType::U8 => "U8",
            DType::BOOL => "BOOL",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DType::ALL
            .iter()
            .copied()
            .find(|d| d.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown dtype {s:?}")))
    }
}

/// Number of elements in a tensor of the given shape. The empty shape is a scalar.
pub fn element_count(shape: &[u64]) -> u64 {
    shape.iter().product()
}

/// Dtype and shape of one tensor, without its location.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorLayout {
    pub dtype: DType,
    pub shape: Vec<u64>,
}

impl TensorLayout {
    pub fn byte_len(&self) -> u64 {
        element_count(&self.shape) * self.dtype.width() as u64
    }
}

/// Name → layout for every tensor in a checkpoint, in name order.
pub type Layout = BTreeMap<String, TensorLayout>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
    /// `(begin, end)` relative to the start of the shard's data region.
    pub offsets: (u64, u64),
}

impl TensorMeta {
    pub fn element_count(&self) -> u64 {
        element_count(&self.shape)
    }

    pub fn byte_len(&self) -> u64 {
        self.offsets.1 - self.offsets.0
    }

    pub fn layout(&self) -> TensorLayout {
        TensorLayout {
            dtype: self.dtype,
            shape: self.shape.clone(),
        }
    }
}

/// A tensor's metadata together with its raw little-endian bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorBlock {
    pub meta: TensorMeta,
    pub data: Vec<u8>,
}

impl TensorBlock {
    /// Builds a block with offsets `(0, data.len())`, checking the length against the shape.
    pub fn new(
        name: impl Into<String>,
        dtype: DType,
        shape: Vec<u64>,
        data: Vec<u8>,
    ) -> Result<Self> {
        let name = name.into();
        let expected = element_count(&shape) * dtype.width() as u64;
        if expected != data.len() as u64 {
            return Err(Error::InvalidArgument(format!(
                "tensor {name:?}: {} bytes given, shape {:?} of {dtype} needs {expected}",
                data.len(),
                shape
            )));
        }
        Ok(TensorBlock {
            meta: TensorMeta {
                name,
                dtype,
                shape,
                offsets: (0, expected),
            },
            data,
        })
    }

    pub fn from_f32(
        name: impl Into<String>,
        dtype: DType,
        shape: Vec<u64>,
        values: &[f32],
    ) -> Result<Self> {
        let data = encode_from_f32(values, dtype)?;
        TensorBlock::new(name, dtype, shape, data)
    }

    pub fn to_f32(&self) -> Result<Vec<f32>> {
        decode_f32(self)
    }
}
