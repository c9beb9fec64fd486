//! SHA-256 helpers for content addressing.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensorstore::CheckpointHandle;

const HASH_BUFFER_BYTES: usize = 1 << 20;

/// Hex SHA-256 of a file's bytes, streamed through a fixed buffer.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; HASH_BUFFER_BYTES];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Identity of a checkpoint: SHA-256 over the newline-joined file digests of
/// its backing files (index first, then shards). For a single-file checkpoint
/// this is the digest of the one file's hash line.
pub fn checkpoint_digest(handle: &CheckpointHandle) -> Result<String> {
    let mut hasher = Sha256::new();
    for file in handle.files() {
        hasher.update(sha256_file(&file)?.as_bytes());
        hasher.update(b"\n");
    }
    Ok(hex::encode(hasher.finalize()))
}
