//! Checksummed binary container shared by dataset and weights files.
//!
//! ```text
//! magic        4 bytes   ("NCLD" dataset, "NCLW" weights)
//! version      u16 LE
//! header_len   u32 LE
//! header       JSON, header_len bytes
//! value_count  u64 LE
//! payload      value_count x f64 LE
//! crc32        u32 LE over header_len..payload (everything after version)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, FormatError, Result};

pub const VERSION: u16 = 1;

pub fn encode<H: Serialize>(magic: [u8; 4], header: &H, payload: &[f64]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header).map_err(|e| FormatError::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(4 + 2 + 4 + header.len() + 8 + payload.len() * 8 + 4);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let body_start = out.len();
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[body_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated {
            needed: usize::MAX,
            available: self.bytes.len(),
        })?;
        if end > self.bytes.len() {
            return Err(FormatError::Truncated {
                needed: end,
                available: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

fn header_only<H: DeserializeOwned>(
    bytes: &[u8],
    magic: [u8; 4],
) -> std::result::Result<(H, Cursor<'_>), FormatError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let found = cur.take(4).map_err(|_| FormatError::BadMagic {
        expected: magic,
        found: bytes.to_vec(),
    })?;
    if found != magic {
        return Err(FormatError::BadMagic {
            expected: magic,
            found: found.to_vec(),
        });
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    let header_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
    let header = cur.take(header_len)?;
    let header = serde_json::from_slice(header).map_err(|e| FormatError::Header(e.to_string()))?;
    Ok((header, cur))
}

/// Decodes the JSON header without reading the payload.
pub fn decode_header<H: DeserializeOwned>(bytes: &[u8], magic: [u8; 4]) -> Result<H> {
    Ok(header_only(bytes, magic)?.0)
}

pub fn decode<H: DeserializeOwned>(bytes: &[u8], magic: [u8; 4]) -> Result<(H, Vec<f64>)> {
    let (header, mut cur) = header_only::<H>(bytes, magic)?;
    let count = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
    let raw = cur.take(
        count
            .checked_mul(8)
            .ok_or(FormatError::Header("value count overflow".into()))?,
    )?;
    let body_end = cur.pos;
    let stored = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if cur.pos != bytes.len() {
        return Err(FormatError::Trailing(bytes.len() - cur.pos).into());
    }
    let computed = crc32fast::hash(&bytes[6..body_end]);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed }.into());
    }
    let payload = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, payload))
}

/// Writes `bytes` to a sibling temporary file and renames it into place, so
/// a failed write never leaves a partial file at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("path has no file name")))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MAGIC: [u8; 4] = *b"TEST";

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(payload in prop::collection::vec(any::<f64>(), 0..64), tag in ".{0,12}") {
            let bytes = encode(MAGIC, &tag, &payload).unwrap();
            let (h, p): (String, Vec<f64>) = decode(&bytes, MAGIC).unwrap();
            prop_assert_eq!(h, tag);
            prop_assert_eq!(p.len(), payload.len());
            for (a, b) in p.iter().zip(&payload) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn detects_corruption() {
        let bytes = encode(MAGIC, &"h", &[1.0, 2.0, 3.0]).unwrap();
        let r: Result<(String, Vec<f64>)> = decode(&bytes[..bytes.len() - 1], MAGIC);
        assert!(matches!(
            r,
            Err(Error::Format(FormatError::Truncated { .. }))
        ));

        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 10] ^= 0x40;
        let r: Result<(String, Vec<f64>)> = decode(&flipped, MAGIC);
        assert!(matches!(
            r,
            Err(Error::Format(FormatError::Checksum { .. }))
        ));

        let r: Result<(String, Vec<f64>)> = decode(&bytes, *b"NOPE");
        assert!(matches!(
            r,
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));

        let mut longer = bytes.clone();
        longer.push(0);
        let r: Result<(String, Vec<f64>)> = decode(&longer, MAGIC);
        assert!(matches!(r, Err(Error::Format(FormatError::Trailing(1)))));
    }
}
