//! RNC1 regional code files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! 0..4     magic "RNC1"
//! 4..8     u32 layer-name byte length L
//! 8..8+L   UTF-8 layer name
//! u32 N, u32 D
//! N*D f32 values, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pooling::CodeMatrix;
use crate::scalar::Scalar;

pub const RNC_MAGIC: &[u8; 4] = b"RNC1";

pub fn encode_codes<T: Scalar>(m: &CodeMatrix<T>) -> Result<Vec<u8>> {
    let name = m.layer().as_bytes();
    let mut out = Vec::with_capacity(16 + name.len() + 4 * m.values().len());
    out.extend_from_slice(RNC_MAGIC);
    out.extend_from_slice(&len_u32(name.len())?.to_le_bytes());
    out.extend_from_slice(name);
    out.extend_from_slice(&len_u32(m.num_regions())?.to_le_bytes());
    out.extend_from_slice(&len_u32(m.dim())?.to_le_bytes());
    for (i, v) in m.values().iter().enumerate() {
        let x = v.to_f32().unwrap_or(f32::NAN);
        if !x.is_finite() {
            return Err(Error::InvalidCodes(format!(
                "layer {}: entry at row {} dim {} is not a finite single-precision value",
                m.layer(),
                i / m.dim(),
                i % m.dim()
            )));
        }
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidCodes(format!("length {n} exceeds u32")))
}

/// Parses an RNC1 payload; `path` only labels errors.
pub fn decode_codes<T: Scalar>(bytes: &[u8], path: &Path) -> Result<CodeMatrix<T>> {
    let fmt = |message: String| Error::Format { path: path.to_path_buf(), message };
    let truncated = |expected: u64| Error::Truncated { path: path.to_path_buf(), expected, actual: bytes.len() as u64 };
    if bytes.len() < 8 {
        return Err(truncated(8));
    }
    if &bytes[..4] != RNC_MAGIC {
        return Err(fmt(format!("bad magic {:?}, expected \"RNC1\"", String::from_utf8_lossy(&bytes[..4]))));
    }
    let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as u64;
    let name_len = read_u32(4);
    let header = 8 + name_len + 8;
    if (bytes.len() as u64) < header {
        return Err(truncated(header));
    }
    let name_end = 8 + name_len as usize;
    let layer = std::str::from_utf8(&bytes[8..name_end]).map_err(|_| fmt("layer name is not UTF-8".into()))?;
    let rows = read_u32(name_end);
    let dim = read_u32(name_end + 4);
    let expected = header + 4 * rows * dim;
    match (bytes.len() as u64).cmp(&expected) {
        std::cmp::Ordering::Less => return Err(truncated(expected)),
        std::cmp::Ordering::Greater => {
            return Err(fmt(format!("{} trailing bytes after {expected}", bytes.len() as u64 - expected)))
        }
        std::cmp::Ordering::Equal => {}
    }
    let values: Vec<T> = bytes[header as usize..]
        .chunks_exact(4)
        .map(|c| T::widen_f32(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    CodeMatrix::new(layer, rows as usize, dim as usize, values).map_err(|e| fmt(e.to_string()))
}

pub fn write_codes<T: Scalar>(path: &Path, m: &CodeMatrix<T>) -> Result<()> {
    let bytes = encode_codes(m)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_codes<T: Scalar>(path: &Path) -> Result<CodeMatrix<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_codes(&bytes, path)
}
