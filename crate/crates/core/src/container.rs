//! Binary container shared by prompt-table and checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic[4] | version u32 | header_len u64 | header (JSON) |
//! blob_count u64 | { blob_len u64 | blob bytes }* | sha256[32]
//! ```
//!
//! The trailing SHA-256 covers every preceding byte.

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const DIGEST_LEN: usize = 32;

pub fn encode<H: Serialize>(magic: &[u8; 4], version: u32, header: &H, blobs: &[Vec<u8>]) -> Vec<u8> {
    let header = serde_json::to_vec(header).expect("container header serializes");
    let mut out = Vec::with_capacity(
        24 + header.len() + blobs.iter().map(|b| b.len() + 8).sum::<usize>() + DIGEST_LEN,
    );
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(blobs.len() as u64).to_le_bytes());
    for blob in blobs {
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(blob);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub struct Decoded<H> {
    pub header: H,
    pub blobs: Vec<Vec<u8>>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptFile("unexpected end of data".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u64(&mut self) -> Result<usize> {
        let raw: [u8; 8] = self.take(8)?.try_into().expect("8 bytes");
        usize::try_from(u64::from_le_bytes(raw)).map_err(|_| Error::CorruptFile("length overflow".into()))
    }
}

pub fn decode<H: DeserializeOwned>(bytes: &[u8], magic: &[u8; 4], version: u32) -> Result<Decoded<H>> {
    if bytes.len() < 4 + 4 + 8 + 8 + DIGEST_LEN {
        return Err(Error::CorruptFile("file too short".into()));
    }
    if &bytes[..4] != magic {
        return Err(Error::CorruptFile("bad magic".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CorruptFile("checksum mismatch".into()));
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if found != version {
        return Err(Error::VersionMismatch {
            found,
            expected: version,
        });
    }
    let mut cur = Cursor { bytes: body, pos: 8 };
    let header_len = cur.u64()?;
    let header = serde_json::from_slice(cur.take(header_len)?)
        .map_err(|e| Error::CorruptFile(format!("bad header: {e}")))?;
    let count = cur.u64()?;
    let mut blobs = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = cur.u64()?;
        blobs.push(cur.take(len)?.to_vec());
    }
    if cur.pos != body.len() {
        return Err(Error::CorruptFile("trailing bytes".into()));
    }
    Ok(Decoded { header, blobs })
}

pub fn f64s_to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::CorruptFile("float blob length not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let blobs = vec![f64s_to_bytes(&[1.5, -0.0, f64::MIN_POSITIVE]), vec![7u8; 3]];
        let bytes = encode(b"TEST", 3, &vec!["a", "b"], &blobs);
        let d: Decoded<Vec<String>> = decode(&bytes, b"TEST", 3).unwrap();
        assert_eq!(d.header, ["a", "b"]);
        assert_eq!(d.blobs, blobs);
        assert_eq!(
            bytes_to_f64s(&d.blobs[0]).unwrap()[2].to_bits(),
            f64::MIN_POSITIVE.to_bits()
        );

        assert!(matches!(
            decode::<Vec<String>>(&bytes[..bytes.len() - 5], b"TEST", 3),
            Err(Error::CorruptFile(_))
        ));
        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        assert!(matches!(
            decode::<Vec<String>>(&flipped, b"TEST", 3),
            Err(Error::CorruptFile(_))
        ));
        assert!(matches!(
            decode::<Vec<String>>(&bytes, b"TEST", 4),
            Err(Error::VersionMismatch { found: 3, expected: 4 })
        ));
    }
}
