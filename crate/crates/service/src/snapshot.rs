//! Per-user snapshot files.
//!
//! Layout, little endian:
//! `b"MNEMOSNP"` | format version u32 | payload length u64 | crc32 u32 | payload.
//! The payload is the bincode encoding of the user's memory. Vectors are
//! stored as 4-byte floats.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use bincode::Options;
use mnemo_core::UserMemory;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"MNEMOSNP";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 4;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("snapshot io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported snapshot format version {found} (this build reads {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("corrupt snapshot: {0}")]
    Corrupt(String),
}

fn options() -> impl Options {
    bincode::DefaultOptions::new()
}

pub fn encode(mem: &UserMemory) -> Vec<u8> {
    let payload = options().serialize(mem).expect("memory serializes");
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

pub fn decode(bytes: &[u8]) -> Result<UserMemory, SnapshotError> {
    if bytes.len() < HEADER_LEN {
        return Err(SnapshotError::Corrupt(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(SnapshotError::Corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(SnapshotError::UnsupportedVersion { found: version });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let crc = u32::from_le_bytes(bytes[20..24].try_into().expect("4 bytes"));
    let payload = &bytes[HEADER_LEN..];
    if payload.len() as u64 != len {
        return Err(SnapshotError::Corrupt(format!(
            "payload is {} bytes, header says {len}",
            payload.len()
        )));
    }
    if crc32fast::hash(payload) != crc {
        return Err(SnapshotError::Corrupt("checksum mismatch".into()));
    }
    let mem: UserMemory = options()
        .with_limit(len)
        .deserialize(payload)
        .map_err(|e| SnapshotError::Corrupt(e.to_string()))?;
    mem.check_integrity()
        .map_err(|e| SnapshotError::Corrupt(e.to_string()))?;
    Ok(mem)
}

/// Writes through a temporary file and a rename, so a crash never leaves a
/// half-written snapshot behind.
pub fn save(mem: &UserMemory, path: &Path) -> Result<u64, SnapshotError> {
    let io = |source| SnapshotError::Io { path: path.to_path_buf(), source };
    let bytes = encode(mem);
    let tmp = path.with_extension("snap.tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)?;
    Ok(bytes.len() as u64)
}

pub fn load(path: &Path) -> Result<UserMemory, SnapshotError> {
    let bytes = fs::read(path).map_err(|source| SnapshotError::Io { path: path.to_path_buf(), source })?;
    decode(&bytes)
}

/// Snapshot file for `user_id` under `dir`.
pub fn user_path(dir: &Path, user_id: &str) -> PathBuf {
    dir.join(format!("{user_id}.snap"))
}

/// Ids usable as file names: ASCII letters, digits, `-`, `_` and `.`, not
/// starting with a dot.
pub fn valid_user_id(user_id: &str) -> bool {
    !user_id.is_empty()
        && user_id.len() <= 128
        && !user_id.starts_with('.')
        && user_id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}
