//! Sectioned binary container used for checkpoints and trajectory files.
//!
//! Layout (all integers little-endian):
//!   magic [4 bytes] | version u32 | meta_len u64 | meta (UTF-8 JSON)
//!   | array_count u64 | arrays...
//! Each array: name_len u64 | name (UTF-8) | dtype u8 (0 = f64)
//!   | ndim u64 | dims u64... | payload (f64 bit patterns).
//!
//! Float payloads round-trip bit-exactly; a file truncated anywhere fails to
//! parse rather than yielding a partial result.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Array;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"UPTC";
pub const TRAJECTORY_MAGIC: [u8; 4] = *b"UPTD";
pub const CONTAINER_VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;

/// Parsed contents of a container file.
#[derive(Clone, Debug)]
pub struct ContainerData {
    pub version: u32,
    /// JSON metadata, byte-for-byte as written.
    pub meta: String,
    pub arrays: Vec<(String, Array<f64>)>,
}

impl ContainerData {
    pub fn array(&self, name: &str) -> Result<&Array<f64>> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::Corrupt(format!("missing array '{name}'")))
    }
}

/// Serializes and writes via a temp file + rename, so an interrupted write
/// never leaves a half-written file at `path`.
pub fn write_container(
    path: &Path,
    magic: [u8; 4],
    meta: &str,
    arrays: &[(String, Array<f64>)],
) -> Result<()> {
    {
        let mut seen: Vec<&str> = arrays.iter().map(|(n, _)| n.as_str()).collect();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArg("duplicate array name in container".into()));
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(&magic);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());
    buf.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
    for (name, array) in arrays {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F64);
        buf.extend_from_slice(&(array.shape().len() as u64).to_le_bytes());
        for &d in array.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in array.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated(what));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn usize_checked(&mut self, what: &'static str) -> Result<usize> {
        let v = self.u64(what)?;
        // Any honest length is far below the file size; an absurd value means
        // we are reading garbage and must not allocate from it.
        if v > self.bytes.len() as u64 * 8 + 1_048_576 {
            return Err(Error::Corrupt(format!("implausible {what} length {v}")));
        }
        Ok(v as usize)
    }
}

pub fn read_container(path: &Path, expected_magic: [u8; 4]) -> Result<ContainerData> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != expected_magic {
        return Err(Error::BadMagic { expected: expected_magic, found: magic });
    }
    let version = u32::from_le_bytes(cur.take(4, "version")?.try_into().expect("4 bytes"));
    if version != CONTAINER_VERSION {
        return Err(Error::VersionMismatch { found: version, supported: CONTAINER_VERSION });
    }
    let meta_len = cur.usize_checked("metadata")?;
    let meta = String::from_utf8(cur.take(meta_len, "metadata")?.to_vec())
        .map_err(|e| Error::Corrupt(format!("metadata is not UTF-8: {e}")))?;

    let n_arrays = cur.usize_checked("array count")?;
    let mut arrays = Vec::with_capacity(n_arrays.min(1024));
    for _ in 0..n_arrays {
        let name_len = cur.usize_checked("array name")?;
        let name = String::from_utf8(cur.take(name_len, "array name")?.to_vec())
            .map_err(|e| Error::Corrupt(format!("array name is not UTF-8: {e}")))?;
        let dtype = cur.take(1, "dtype tag")?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::Corrupt(format!("unsupported dtype tag {dtype} for '{name}'")));
        }
        let ndim = cur.usize_checked("shape")?;
        if ndim == 0 || ndim > 8 {
            return Err(Error::Corrupt(format!("array '{name}' has {ndim} dimensions")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut len = 1usize;
        for _ in 0..ndim {
            let d = cur.usize_checked("shape")?;
            len = len
                .checked_mul(d)
                .ok_or_else(|| Error::Corrupt(format!("array '{name}' shape overflows")))?;
            shape.push(d);
        }
        let payload = cur.take(len * 8, "array payload")?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let array = Array::new(shape, data)
            .map_err(|e| Error::Corrupt(format!("array '{name}': {e}")))?;
        if arrays.iter().any(|(n, _)| n == &name) {
            return Err(Error::Corrupt(format!("duplicate array '{name}'")));
        }
        arrays.push((name, array));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after last array",
            bytes.len() - cur.pos
        )));
    }
    Ok(ContainerData { version, meta, arrays })
}
