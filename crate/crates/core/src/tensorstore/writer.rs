use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::reader::{open_checkpoint, CheckpointHandle};
use super::{element_count, DType, TensorBlock};
use crate::error::{Error, Result};

pub const INDEX_FILE_NAME: &str = "model.safetensors.index.json";
const WRITE_BUFFER_BYTES: usize = 1 << 20;

/// Name, dtype and shape of a tensor to be written; its bytes come from a producer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, dtype: DType, shape: Vec<u64>) -> Self {
        TensorSpec {
            name: name.into(),
            dtype,
            shape,
        }
    }

    pub fn byte_len(&self) -> u64 {
        element_count(&self.shape) * self.dtype.width() as u64
    }
}

#[derive(Debug, Clone)]
pub struct WriteOptions {
    pub max_shard_bytes: u64,
    /// Written as the `__metadata__` table of every shard, keys sorted.
    pub metadata: BTreeMap<String, String>,
}

impl Default for WriteOptions {
    fn default() -> Self {
        WriteOptions {
            max_shard_bytes: u64::MAX,
            metadata: BTreeMap::new(),
        }
    }
}

impl WriteOptions {
    pub fn with_max_shard_bytes(mut self, max: u64) -> Self {
        self.max_shard_bytes = max;
        self
    }

    pub fn with_metadata(mut self, metadata: BTreeMap<String, String>) -> Self {
        self.metadata = metadata;
        self
    }
}

// Field order is alphabetical so the serialized keys are sorted.
#[derive(Serialize)]
struct HeaderEntry<'a> {
    data_offsets: [u64; 2],
    dtype: &'a str,
    shape: &'a [u64],
}

#[derive(Serialize)]
#[serde(untagged)]
enum HeaderValue<'a> {
    Tensor(HeaderEntry<'a>),
    Metadata(&'a BTreeMap<String, String>),
}

#[derive(Serialize)]
struct IndexMetadata {
    total_size: u64,
}

#[derive(Serialize)]
struct IndexDoc<'a> {
    metadata: IndexMetadata,
    weight_map: BTreeMap<&'a str, &'a str>,
}

/// Canonical header bytes for one shard: sorted compact JSON, space-padded to a multiple of 8.
fn header_bytes(specs: &[&TensorSpec], metadata: &BTreeMap<String, String>) -> Vec<u8> {
    let mut map: BTreeMap<&str, HeaderValue> = BTreeMap::new();
    if !metadata.is_empty() {
        map.insert("__metadata__", HeaderValue::Metadata(metadata));
    }
    let mut offset = 0u64;
    for spec in specs {
        let len = spec.byte_len();
        map.insert(
            &spec.name,
            HeaderValue::Tensor(HeaderEntry {
                data_offsets: [offset, offset + len],
                dtype: spec.dtype.as_str(),
                shape: &spec.shape,
            }),
        );
        offset += len;
    }
    let mut bytes = serde_json::to_vec(&map).expect("header serialization cannot fail");
    let padded = bytes.len().div_ceil(8) * 8;
    bytes.resize(padded, b' ');
    bytes
}

/// Greedy packing in the given (sorted) order: a new shard starts when the next
/// tensor would push the current one past `max_shard_bytes`.
fn pack_shards(specs: &[TensorSpec], max_shard_bytes: u64) -> Result<Vec<Vec<&TensorSpec>>> {
    let mut shards: Vec<Vec<&TensorSpec>> = vec![Vec::new()];
    let mut current = 0u64;
    for spec in specs {
        let len = spec.byte_len();
        if len > max_shard_bytes {
            return Err(Error::TensorTooLarge {
                name: spec.name.clone(),
                size: len,
                max: max_shard_bytes,
            });
        }
        let last = shards.last_mut().expect("at least one shard");
        if !last.is_empty() && current + len > max_shard_bytes {
            shards.push(vec![spec]);
            current = len;
        } else {
            last.push(spec);
            current += len;
        }
    }
    Ok(shards)
}

pub fn shard_file_name(index: usize, count: usize) -> String {
    format!("model-{:05}-of-{:05}.safetensors", index + 1, count)
}

fn wants_directory(dest: &Path) -> bool {
    dest.is_dir()
        || dest
            .as_os_str()
            .to_string_lossy()
            .ends_with(std::path::MAIN_SEPARATOR)
}

fn staging_path(dest: &Path) -> Result<PathBuf> {
    let trimmed: PathBuf = dest.components().collect();
    let name = trimmed.file_name().ok_or_else(|| {
        Error::InvalidArgument(format!("output path {} has no file name", dest.display()))
    })?;
    let parent = trimmed
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    Ok(parent.join(format!(
        ".{}.partial-{}",
        name.to_string_lossy(),
        std::process::id()
    )))
}

fn write_shard<F>(
    path: &Path,
    specs: &[&TensorSpec],
    metadata: &BTreeMap<String, String>,
    produce: &mut F,
) -> Result<()>
where
    F: FnMut(&TensorSpec) -> Result<Vec<u8>>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::with_capacity(WRITE_BUFFER_BYTES, file);
    let header = header_bytes(specs, metadata);
    out.write_all(&(header.len() as u64).to_le_bytes())
        .and_then(|_| out.write_all(&header))
        .map_err(|e| Error::io(path, e))?;
    for spec in specs {
        let data = produce(spec)?;
        if data.len() as u64 != spec.byte_len() {
            return Err(Error::Invariant(format!(
                "producer returned {} bytes for {:?}, expected {}",
                data.len(),
                spec.name,
                spec.byte_len()
            )));
        }
        out.write_all(&data).map_err(|e| Error::io(path, e))?;
    }
    let file = out
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    file.sync_all().map_err(|e| Error::io(path, e))
}

fn remove_path(path: &Path) {
    let _ = if path.is_dir() {
        std::fs::remove_dir_all(path)
    } else {
        std::fs::remove_file(path)
    };
}

/// Writes a checkpoint whose tensors are described by `specs` and whose bytes
/// are pulled from `produce`, one tensor at a time in ascending name order.
///
/// The output is a single container file unless `dest` is a directory (existing
/// or spelled with a trailing separator) or the tensors need more than one
/// shard, in which case `dest` becomes a directory of shards plus an index.
/// Output is staged next to `dest` and only moved into place on success.
pub fn write_checkpoint<F>(
    mut specs: Vec<TensorSpec>,
    dest: impl AsRef<Path>,
    opts: &WriteOptions,
    mut produce: F,
) -> Result<CheckpointHandle>
where
    F: FnMut(&TensorSpec) -> Result<Vec<u8>>,
{
    let dest = dest.as_ref();
    specs.sort_by(|a, b| a.name.cmp(&b.name));
    if let Some(dup) = specs.windows(2).find(|w| w[0].name == w[1].name) {
        return Err(Error::DuplicateTensor(dup[0].name.clone()));
    }
    if let Some(empty) = specs.iter().find(|s| s.name.is_empty()) {
        return Err(Error::InvalidArgument(format!(
            "empty tensor name ({:?})",
            empty.dtype
        )));
    }
    let shards = pack_shards(&specs, opts.max_shard_bytes)?;
    let as_dir = wants_directory(dest) || shards.len() > 1;
    if as_dir && dest.is_dir() {
        let is_empty = std::fs::read_dir(dest)
            .map_err(|e| Error::io(dest, e))?
            .next()
            .is_none();
        if !is_empty && !dest.join(INDEX_FILE_NAME).is_file() {
            return Err(Error::InvalidArgument(format!(
                "refusing to replace non-checkpoint directory {}",
                dest.display()
            )));
        }
    }

    let staging = staging_path(dest)?;
    remove_path(&staging);
    let result = (|| -> Result<()> {
        if as_dir {
            std::fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
            let count = shards.len();
            let mut weight_map = BTreeMap::new();
            for (i, shard) in shards.iter().enumerate() {
                let file_name = shard_file_name(i, count);
                write_shard(
                    &staging.join(&file_name),
                    shard,
                    &opts.metadata,
                    &mut produce,
                )?;
                for spec in shard {
                    weight_map.insert(spec.name.as_str(), file_name.clone());
                }
            }
            let doc = IndexDoc {
                metadata: IndexMetadata {
                    total_size: specs.iter().map(TensorSpec::byte_len).sum(),
                },
                weight_map: weight_map.iter().map(|(k, v)| (*k, v.as_str())).collect(),
            };
            let index_path = staging.join(INDEX_FILE_NAME);
            let json = serde_json::to_vec(&doc).expect("index serialization cannot fail");
            std::fs::write(&index_path, json).map_err(|e| Error::io(&index_path, e))?;
        } else {
            write_shard(&staging, &shards[0], &opts.metadata, &mut produce)?;
        }
        if dest.exists() {
            remove_path(dest);
        }
        std::fs::rename(&staging, dest).map_err(|e| Error::io(dest, e))
    })();
    if let Err(e) = result {
        remove_path(&staging);
        return Err(e);
    }
    open_checkpoint(dest)
}

/// Writes in-memory blocks; convenient for small checkpoints and tests.
pub fn write_blocks(
    blocks: Vec<TensorBlock>,
    dest: impl AsRef<Path>,
    opts: &WriteOptions,
) -> Result<CheckpointHandle> {
    let mut by_name = BTreeMap::new();
    let mut specs = Vec::with_capacity(blocks.len());
    for block in blocks {
        let spec = TensorSpec::new(
            block.meta.name.clone(),
            block.meta.dtype,
            block.meta.shape.clone(),
        );
        if by_name
            .insert(block.meta.name.clone(), block.data)
            .is_some()
        {
            return Err(Error::DuplicateTensor(spec.name));
        }
        specs.push(spec);
    }
    write_checkpoint(specs, dest, opts, |spec| {
        by_name
            .remove(&spec.name)
            .ok_or_else(|| Error::Invariant(format!("tensor {:?} produced twice", spec.name)))
    })
}
