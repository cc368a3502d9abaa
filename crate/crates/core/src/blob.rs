//! Checksummed little-endian f32 array files.
//!
//! Layout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SPRK"
//! 4       2     format version (u16 LE), currently 1
//! 6       2     rank (u16 LE), 1..=4
//! 8       16    dims (4 x u32 LE); entries past `rank` are 0
//! 24      4*n   payload: n = prod(dims) f32 LE values, C-order
//! 24+4n   4     CRC-32 (IEEE) of the payload bytes (u32 LE)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SPRK";
pub const BLOB_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;
pub const MAX_RANK: usize = 4;

/// Total file size of a blob holding `numel` values.
pub fn blob_len(numel: usize) -> usize {
    HEADER_LEN + 4 * numel + 4
}

pub fn encode(dims: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::InvalidInput(format!("blob rank must be 1..={MAX_RANK}, got {}", dims.len())));
    }
    let numel: usize = dims.iter().product();
    if numel != data.len() {
        return Err(Error::InvalidInput(format!("blob dims {dims:?} need {numel} values, got {}", data.len())));
    }
    let mut out = Vec::with_capacity(blob_len(numel));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u16).to_le_bytes());
    for k in 0..MAX_RANK {
        let d = dims.get(k).copied().unwrap_or(0);
        let d = u32::try_from(d).map_err(|_| Error::InvalidInput(format!("blob dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[HEADER_LEN..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Parses a blob; `path` is only used to name the file in errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::format(path, format!("truncated blob: {} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(path, "bad magic, not a blob file"));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let version = u16_at(4);
    if version != BLOB_VERSION {
        return Err(Error::UnsupportedVersion { path: path.to_path_buf(), version: version as u64 });
    }
    let rank = u16_at(6) as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::format(path, format!("bad rank {rank}")));
    }
    let dims: Vec<usize> = (0..rank).map(|k| u32_at(8 + 4 * k) as usize).collect();
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, d| acc.checked_mul(*d))
        .ok_or_else(|| Error::format(path, format!("dims {dims:?} overflow")))?;
    let expected = numel
        .checked_mul(4)
        .and_then(|n| n.checked_add(HEADER_LEN + 4))
        .ok_or_else(|| Error::format(path, format!("dims {dims:?} overflow")))?;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("blob length {} does not match dims {dims:?} (expected {expected} bytes)", bytes.len()),
        ));
    }
    let payload = &bytes[HEADER_LEN..expected - 4];
    let stored = u32_at(expected - 4);
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { path: path.to_path_buf(), stored, computed });
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((dims, data))
}

pub fn write(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    let bytes = encode(dims, data)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let bytes = encode(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(bytes.len(), blob_len(6));
        assert_eq!(&bytes[..4], b"SPRK");
        assert_eq!(&bytes[4..8], &[1, 0, 2, 0]);
        assert_eq!(&bytes[8..24], &[2, 0, 0, 0, 3, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[28..32], &1.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_bad_rank_and_count() {
        assert!(encode(&[], &[]).is_err());
        assert!(encode(&[1, 1, 1, 1, 1], &[0.0]).is_err());
        assert!(encode(&[2, 2], &[0.0; 3]).is_err());
    }

    #[test]
    fn detects_truncation_version_and_corruption() {
        let p = Path::new("x.bin");
        let bytes = encode(&[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let err = decode(&bytes[..bytes.len() - 1], p).unwrap_err();
        assert!(err.to_string().contains("x.bin"), "{err}");

        let mut v2 = bytes.clone();
        v2[4] = 9;
        assert!(matches!(decode(&v2, p), Err(Error::UnsupportedVersion { version: 9, .. })));

        let mut flipped = bytes.clone();
        flipped[HEADER_LEN + 5] ^= 0x40;
        assert!(matches!(decode(&flipped, p), Err(Error::Checksum { .. })));

        let mut magic = bytes;
        magic[0] = b'X';
        assert!(decode(&magic, p).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_bits(dims in prop::collection::vec(1usize..5, 1..=4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|k| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(k as u32 * 40503) & 0x7f7f_ffff)).collect();
            let bytes = encode(&dims, &data).unwrap();
            let (d2, v2) = decode(&bytes, Path::new("p")).unwrap();
            prop_assert_eq!(d2, dims);
            prop_assert!(v2.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
