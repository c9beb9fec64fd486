use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer};

use super::writer::INDEX_FILE_NAME;
use super::{element_count, DType, Layout, TensorBlock, TensorMeta};
use crate::error::{Error, Result};

/// Upper bound on a header's JSON length; anything larger is treated as corruption.
const MAX_HEADER_BYTES: u64 = 100 * 1024 * 1024;
const METADATA_KEY: &str = "__metadata__";

#[derive(Debug)]
pub struct ShardFile {
    pub path: PathBuf,
    file: File,
    pub header_len: u64,
    pub data_len: u64,
}

impl ShardFile {
    pub fn data_start(&self) -> u64 {
        8 + self.header_len
    }
}

/// An opened checkpoint. Only headers are held in memory; tensor payloads are
/// read on demand and the handle may be shared across threads.
#[derive(Debug)]
pub struct CheckpointHandle {
    root: PathBuf,
    index_file: Option<PathBuf>,
    shards: Vec<ShardFile>,
    index: BTreeMap<String, (usize, TensorMeta)>,
    metadata: BTreeMap<String, String>,
    total_params: u64,
    role: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    dtype: String,
    shape: Vec<u64>,
    data_offsets: [u64; 2],
}

/// Header object with duplicate-key detection, which a plain map would hide.
struct RawHeader {
    tensors: Vec<(String, RawEntry)>,
    metadata: Option<BTreeMap<String, String>>,
}

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct HeaderVisitor;

        impl<'de> Visitor<'de> for HeaderVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object of tensor entries")
            }

            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<RawHeader, A::Error> {
                let mut seen = BTreeSet::new();
                let mut tensors = Vec::new();
                let mut metadata = None;
                while let Some(key) = map.next_key::<String>()? {
                    if !seen.insert(key.clone()) {
                        return Err(de::Error::custom(format!("duplicate key {key:?}")));
                    }
                    if key == METADATA_KEY {
                        metadata = Some(map.next_value()?);
                    } else {
                        tensors.push((key, map.next_value()?));
                    }
                }
                Ok(RawHeader { tensors, metadata })
            }
        }

        deserializer.deserialize_map(HeaderVisitor)
    }
}

#[derive(Deserialize)]
struct RawIndex {
    #[serde(default)]
    #[allow(dead_code)]
    metadata: serde_json::Value,
    weight_map: BTreeMap<String, String>,
}

struct ParsedShard {
    shard: ShardFile,
    tensors: Vec<TensorMeta>,
    metadata: BTreeMap<String, String>,
}

fn parse_shard(path: &Path) -> Result<ParsedShard> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    if file_len < 8 {
        return Err(Error::format(
            path,
            "file shorter than the 8-byte length prefix",
        ));
    }
    let mut prefix = [0u8; 8];
    file.read_exact(&mut prefix)
        .map_err(|e| Error::io(path, e))?;
    let header_len = u64::from_le_bytes(prefix);
    if header_len > MAX_HEADER_BYTES || header_len > file_len - 8 {
        return Err(Error::format(
            path,
            format!("header length {header_len} exceeds file size {file_len}"),
        ));
    }
    let mut header = vec![0u8; header_len as usize];
    file.read_exact(&mut header)
        .map_err(|e| Error::io(path, e))?;
    let text =
        std::str::from_utf8(&header).map_err(|_| Error::format(path, "header is not UTF-8"))?;
    let raw: RawHeader = serde_json::from_str(text.trim_end_matches(' '))
        .map_err(|e| Error::format(path, format!("bad header JSON: {e}")))?;
    let data_len = file_len - 8 - header_len;

    let mut tensors = Vec::with_capacity(raw.tensors.len());
    for (name, entry) in raw.tensors {
        if name.is_empty() {
            return Err(Error::format(path, "empty tensor name"));
        }
        let dtype: DType = entry.dtype.parse().map_err(|_| {
            Error::format(
                path,
                format!("tensor {name:?}: unknown dtype {:?}", entry.dtype),
            )
        })?;
        let [begin, end] = entry.data_offsets;
        let expected = element_count(&entry.shape)
            .checked_mul(dtype.width() as u64)
            .ok_or_else(|| Error::format(path, format!("tensor {name:?}: shape overflows")))?;
        if end < begin || end - begin != expected {
            return Err(Error::format(
                path,
                format!("tensor {name:?}: offsets [{begin}, {end}] do not match {expected} bytes"),
            ));
        }
        if end > data_len {
            return Err(Error::format(
                path,
                format!(
                    "tensor {name:?}: range ends at {end} beyond data region of {data_len} bytes"
                ),
            ));
        }
        tensors.push(TensorMeta {
            name,
            dtype,
            shape: entry.shape,
            offsets: (begin, end),
        });
    }

    let mut ranges: Vec<&TensorMeta> = tensors.iter().filter(|t| t.byte_len() > 0).collect();
    ranges.sort_by_key(|t| t.offsets);
    for pair in ranges.windows(2) {
        if pair[0].offsets.1 > pair[1].offsets.0 {
            return Err(Error::format(
                path,
                format!(
                    "byte-range overlap between {:?} and {:?}",
                    pair[0].name, pair[1].name
                ),
            ));
        }
    }

    Ok(ParsedShard {
        shard: ShardFile {
            path: path.to_path_buf(),
            file,
            header_len,
            data_len,
        },
        tensors,
        metadata: raw.metadata.unwrap_or_default(),
    })
}

fn find_index_file(dir: &Path) -> Result<PathBuf> {
    let preferred = dir.join(INDEX_FILE_NAME);
    if preferred.is_file() {
        return Ok(preferred);
    }
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if name.to_string_lossy().ends_with(".index.json") {
            found.push(entry.path());
        }
    }
    found.sort();
    match found.len() {
        0 => Err(Error::NoShardIndex(dir.to_path_buf())),
        1 => Ok(found.remove(0)),
        _ => Err(Error::format(
            dir,
            format!("ambiguous shard index: {} candidates", found.len()),
        )),
    }
}

/// Opens a single container file, or a directory holding a shard index plus shards.
pub fn open_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointHandle> {
    let path = path.as_ref();
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    let (index_file, parsed) = if meta.is_dir() {
        let index_path = find_index_file(path)?;
        let bytes = std::fs::read(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: RawIndex = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(&index_path, format!("bad index JSON: {e}")))?;
        let files: BTreeSet<&String> = index.weight_map.values().collect();
        let mut parsed = Vec::with_capacity(files.len());
        for file in files {
            let shard_path = path.join(file);
            if !shard_path.is_file() {
                return Err(Error::format(
                    &index_path,
                    format!("index references missing shard {file:?}"),
                ));
            }
            parsed.push(parse_shard(&shard_path)?);
        }
        // Every weight_map entry must be found in the shard it names, and vice versa.
        for p in &parsed {
            let file_name = p
                .shard
                .path
                .file_name()
                .unwrap()
                .to_string_lossy()
                .into_owned();
            for t in &p.tensors {
                match index.weight_map.get(&t.name) {
                    Some(f) if *f == file_name => {}
                    Some(_) => {
                        // Present in a shard other than the indexed one: the name is declared twice.
                        if parsed
                            .iter()
                            .filter(|q| q.tensors.iter().any(|u| u.name == t.name))
                            .count()
                            > 1
                        {
                            return Err(Error::DuplicateTensor(t.name.clone()));
                        }
                        return Err(Error::format(
                            &index_path,
                            format!(
                                "tensor {:?} indexed to a different shard than {file_name:?}",
                                t.name
                            ),
                        ));
                    }
                    None => {
                        return Err(Error::format(
                            &index_path,
                            format!(
                                "tensor {:?} in {file_name:?} is missing from weight_map",
                                t.name
                            ),
                        ))
                    }
                }
            }
        }
        (Some((index_path, index.weight_map)), parsed)
    } else {
        (None, vec![parse_shard(path)?])
    };

    let mut shards = Vec::with_capacity(parsed.len());
    let mut index = BTreeMap::new();
    let mut metadata = BTreeMap::new();
    let mut total_params = 0u64;
    for (shard_id, p) in parsed.into_iter().enumerate() {
        for (k, v) in p.metadata {
            metadata.entry(k).or_insert(v);
        }
        for t in p.tensors {
            total_params += t.element_count();
            let name = t.name.clone();
            if index.insert(name.clone(), (shard_id, t)).is_some() {
                return Err(Error::DuplicateTensor(name));
            }
        }
        shards.push(p.shard);
    }
    if let Some((index_path, weight_map)) = &index_file {
        if let Some(missing) = weight_map.keys().find(|k| !index.contains_key(*k)) {
            return Err(Error::format(
                index_path,
                format!("weight_map names {missing:?}, which no shard declares"),
            ));
        }
    }
    let index_file = index_file.map(|(p, _)| p);

    Ok(CheckpointHandle {
        root: path.to_path_buf(),
        index_file,
        shards,
        index,
        metadata,
        total_params,
        role: String::new(),
    })
}

impl CheckpointHandle {
    pub fn with_role(mut self, role: impl Into<String>) -> Self {
        self.role = role.into();
        self
    }

    pub fn role(&self) -> &str {
        &self.role
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn is_sharded(&self) -> bool {
        self.index_file.is_some()
    }

    pub fn shards(&self) -> &[ShardFile] {
        &self.shards
    }

    /// Every file backing this checkpoint: the index document (if any) then shards in order.
    pub fn files(&self) -> Vec<PathBuf> {
        self.index_file
            .iter()
            .cloned()
            .chain(self.shards.iter().map(|s| s.path.clone()))
            .collect()
    }

    pub fn total_params(&self) -> u64 {
        self.total_params
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Tensor metadata in ascending name order.
    pub fn tensors(&self) -> impl Iterator<Item = &TensorMeta> {
        self.index.values().map(|(_, m)| m)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    pub fn meta(&self, name: &str) -> Result<&TensorMeta> {
        self.index
            .get(name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn shard_of(&self, name: &str) -> Result<&ShardFile> {
        let (id, _) = self
            .index
            .get(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
        Ok(&self.shards[*id])
    }

    pub fn layout(&self) -> Layout {
        self.tensors()
            .map(|m| (m.name.clone(), m.layout()))
            .collect()
    }

    /// Byte size of the largest tensor.
    pub fn max_tensor_bytes(&self) -> u64 {
        self.tensors().map(TensorMeta::byte_len).max().unwrap_or(0)
    }

    /// Reads exactly the bytes of one tensor. Safe to call concurrently.
    pub fn read_tensor(&self, name: &str) -> Result<TensorBlock> {
        let (shard_id, meta) = self
            .index
            .get(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
        let shard = &self.shards[*shard_id];
        let len = meta.byte_len();
        let mut data = vec![0u8; len as usize];
        if len > 0 {
            read_exact_at(&shard.file, &mut data, shard.data_start() + meta.offsets.0).map_err(
                |e| {
                    if e.kind() == std::io::ErrorKind::UnexpectedEof {
                        Error::ShortRead {
                            name: name.to_string(),
                            expected: len,
                        }
                    } else {
                        Error::io(&shard.path, e)
                    }
                },
            )?;
        }
        Ok(TensorBlock {
            meta: meta.clone(),
            data,
        })
    }
}

#[cfg(unix)]
fn read_exact_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

#[cfg(windows)]
fn read_exact_at(file: &File, mut buf: &mut [u8], mut offset: u64) -> std::io::Result<()> {
    use std::os::windows::fs::FileExt;
    while !buf.is_empty() {
        match file.seek_read(buf, offset) {
            Ok(0) => return Err(std::io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => {
                buf = &mut buf[n..];
                offset += n as u64;
            }
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(())
}
