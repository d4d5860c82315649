//! Binary container format shared by every on-disk artifact.
//!
//! Layout: `magic (8 bytes) | version (u16 LE) | nfields (u16 LE) |
//! fields (u32 LE each) | payload | fnv1a64(payload) (u64 LE)`.
//! The fields carry format-specific dimensions (bank N and C, dataset
//! sample counts, ...); the checksum covers the payload bytes, so
//! truncation and corruption are both detected. Writes go through a
//! temp-file-and-rename so a crash never leaves a half-written artifact
//! behind.

use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("version mismatch: file has {found}, this build reads {expected}")]
    VersionMismatch { expected: u16, found: u16 },
    #[error("corrupt file: {0}")]
    Corrupt(String),
}

/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Write `bytes` to `path` atomically: temp file in the same directory,
/// flush, then rename over the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp_path = Path::new(&tmp);
    {
        let mut f = fs::File::create(tmp_path)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp_path, path)?;
    Ok(())
}

/// Serialize a container into bytes.
pub fn encode_container(magic: &[u8; 8], version: u16, fields: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 + fields.len() * 4 + payload.len() + 8);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(fields.len() as u16).to_le_bytes());
    for f in fields {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out.extend_from_slice(payload);
    out.extend_from_slice(&fnv1a64(payload).to_le_bytes());
    out
}

pub fn write_container(
    path: &Path,
    magic: &[u8; 8],
    version: u16,
    fields: &[u32],
    payload: &[u8],
) -> Result<(), IoError> {
    write_atomic(path, &encode_container(magic, version, fields, payload))
}

/// Parse container bytes, verifying magic, version, and checksum.
pub fn decode_container(
    bytes: &[u8],
    magic: &[u8; 8],
    version: u16,
) -> Result<(Vec<u32>, Vec<u8>), IoError> {
    if bytes.len() < 12 {
        return Err(IoError::Corrupt(format!("file is only {} bytes", bytes.len())));
    }
    if &bytes[..8] != magic {
        return Err(IoError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
        });
    }
    let found_version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if found_version != version {
        return Err(IoError::VersionMismatch { expected: version, found: found_version });
    }
    let nfields = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
    let body_start = 12 + nfields * 4;
    if bytes.len() < body_start + 8 {
        return Err(IoError::Corrupt("truncated header".into()));
    }
    let fields: Vec<u32> = (0..nfields)
        .map(|i| {
            u32::from_le_bytes(bytes[12 + i * 4..16 + i * 4].try_into().expect("4-byte slice"))
        })
        .collect();
    let payload = &bytes[body_start..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8-byte slice"));
    let computed = fnv1a64(payload);
    if stored != computed {
        return Err(IoError::Corrupt(format!(
            "checksum mismatch: stored {stored:#018x}, computed {computed:#018x}"
        )));
    }
    Ok((fields, payload.to_vec()))
}

pub fn read_container(
    path: &Path,
    magic: &[u8; 8],
    version: u16,
) -> Result<(Vec<u32>, Vec<u8>), IoError> {
    decode_container(&fs::read(path)?, magic, version)
}

pub fn push_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Read `count` little-endian f64 values starting at `*offset`, advancing it.
pub fn take_f64s(bytes: &[u8], offset: &mut usize, count: usize) -> Result<Vec<f64>, IoError> {
    let need = count * 8;
    if bytes.len() < *offset + need {
        return Err(IoError::Corrupt(format!(
            "payload too short: wanted {} bytes at offset {}, have {}",
            need,
            *offset,
            bytes.len()
        )));
    }
    let out = bytes[*offset..*offset + need]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    *offset += need;
    Ok(out)
}

pub fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn take_u32(bytes: &[u8], offset: &mut usize) -> Result<u32, IoError> {
    if bytes.len() < *offset + 4 {
        return Err(IoError::Corrupt("payload too short for u32".into()));
    }
    let v = u32::from_le_bytes(bytes[*offset..*offset + 4].try_into().expect("4-byte slice"));
    *offset += 4;
    Ok(v)
}
