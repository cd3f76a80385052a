//! Binary block checkpoint.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SBMO"
//! 4       4     format version (u32 LE, currently 1)
//! 8       4     d, embedding dimension (u32 LE)
//! 12      4     n, number of experts (u32 LE)
//! 16      4     activation id (0 = ReLU, 1 = GELU)
//! 20      4     pooling id (0 = TOP-1, 1 = ALL, 2 = random gate)
//! 24      ...   parameters, f32 LE, in `MoeBlock::param_slices` order
//! ```
//!
//! With `h = ⌈d/2⌉` the payload holds `n·(2·h·d + h + d) + h·d + h + n·h + 2n`
//! floats; any other length is rejected.

use std::path::Path;

use super::{hidden_dim, Activation, MoeBlock, Pooling};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SBMO";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

pub fn to_bytes(block: &MoeBlock<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * block.num_params());
    out.extend_from_slice(&MAGIC);
    for v in [
        VERSION,
        block.dim() as u32,
        block.num_experts() as u32,
        block.activation.id(),
        block.pooling.id(),
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for slice in block.param_slices() {
        for v in slice {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<MoeBlock<f32>> {
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
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let version = word(1);
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.into(),
            found: version,
        });
    }
    let (d, n) = (word(2) as usize, word(3) as usize);
    let activation = Activation::from_id(word(4))
        .ok_or_else(|| Error::invalid(format!("{}: unknown activation id {}", path.display(), word(4))))?;
    let pooling = Pooling::from_id(word(5))
        .ok_or_else(|| Error::invalid(format!("{}: unknown pooling id {}", path.display(), word(5))))?;

    let mut block = MoeBlock::<f32>::zeros(d, n, activation)?;
    block.pooling = pooling;
    let expected = HEADER_LEN + 4 * block.num_params();
    debug_assert_eq!(block.num_params(), param_count(d, n));
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected: expected as u64,
            found: bytes.len() as u64,
        });
    }
    if bytes.len() > expected {
        return Err(Error::TrailingBytes {
            path: path.into(),
            found: (bytes.len() - expected) as u64,
        });
    }
    let mut floats = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    for slice in block.param_slices_mut() {
        for v in slice.iter_mut() {
            *v = floats.next().expect("length checked");
        }
    }
    if !block.is_finite() {
        return Err(Error::NonFinite("checkpoint parameters"));
    }
    Ok(block)
}

pub fn param_count(d: usize, n: usize) -> usize {
    let h = hidden_dim(d);
    n * (2 * h * d + h + d) + h * d + h + n * h + 2 * n
}

pub fn save(block: &MoeBlock<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(block)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<MoeBlock<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
