//! Binary embedding files.
//!
//! ```text
//! offset  size         field
//! 0       4            magic "SBME"
//! 4       4            format version (u32 LE, currently 1)
//! 8       8            count (u64 LE)
//! 16      4            dim (u32 LE)
//! 20      count·dim·4  f32 LE, row-major
//! ```
//!
//! Identifiers live in a sibling text file with the `.ids` extension
//! (`corpus.sbme` → `corpus.ids`), one UTF-8 id per line in row order. Ids
//! must be unique and free of whitespace so they survive TREC formats.

use std::path::{Path, PathBuf};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: [u8; 4] = *b"SBME";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

pub fn ids_path(path: &Path) -> PathBuf {
    path.with_extension("ids")
}

pub fn to_bytes(m: &EmbeddingMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.len() * m.dim());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m.len() as u64).to_le_bytes());
    out.extend_from_slice(&(m.dim() as u32).to_le_bytes());
    for v in m.vectors().as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses the binary payload; returns `(count, dim, values)`.
pub fn parse_payload(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.into(),
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: MAGIC,
            found: magic,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.into(),
            found: version,
        });
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as u64;
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN as u64))
        .ok_or_else(|| Error::invalid(format!("{}: header sizes overflow", path.display())))?;
    let found = bytes.len() as u64;
    if found < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found,
        });
    }
    if found > expected {
        return Err(Error::TrailingBytes {
            path: path.into(),
            found: found - expected,
        });
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((count as usize, dim as usize, values))
}

pub fn format_ids(ids: &[String]) -> Result<String> {
    let mut out = String::new();
    for id in ids {
        validate_id(id)?;
        out.push_str(id);
        out.push('\n');
    }
    Ok(out)
}

pub fn validate_id(id: &str) -> Result<()> {
    if id.is_empty() || id.chars().any(char::is_whitespace) {
        return Err(Error::invalid(format!("id {id:?} is empty or contains whitespace")));
    }
    Ok(())
}

pub fn write_embeddings(path: impl AsRef<Path>, m: &EmbeddingMatrix) -> Result<()> {
    let path = path.as_ref();
    let ids = format_ids(m.ids())?;
    std::fs::write(path, to_bytes(m)).map_err(|e| Error::io(path, e))?;
    let idp = ids_path(path);
    std::fs::write(&idp, ids).map_err(|e| Error::io(&idp, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let idp = ids_path(path);
    let ids_text = std::fs::read_to_string(&idp).map_err(|e| Error::io(&idp, e))?;
    decode(&bytes, &ids_text, path)
}

/// Decodes a payload plus the text of its id file.
pub fn decode(bytes: &[u8], ids_text: &str, path: &Path) -> Result<EmbeddingMatrix> {
    let (count, dim, values) = parse_payload(bytes, path)?;
    let ids: Vec<String> = ids_text.lines().map(str::to_string).collect();
    if ids.len() != count {
        return Err(Error::IdCountMismatch {
            path: path.into(),
            header: count as u64,
            ids: ids.len(),
        });
    }
    for id in &ids {
        validate_id(id)?;
    }
    EmbeddingMatrix::new(ids, Matrix::from_vec(count, dim, values)?)
}
