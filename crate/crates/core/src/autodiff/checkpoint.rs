//! Binary container for named tensors with an attached metadata document.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PTCK" | version u32 | meta_len u64 | meta bytes (UTF-8)
//! | count u64 | count x (name_len u32 | name | rows u64 | cols u64 | rows*cols f64)
//! | sha256 of everything above (32 bytes)
//! ```
//!
//! Entries are written in name order, so identical inputs give identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_named_tensors(meta: &str, tensors: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::corrupt(self.path, "truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::corrupt(self.path, format!("implausible length {v}")))
    }
}

pub fn decode_named_tensors(bytes: &[u8], path: &Path) -> Result<(String, BTreeMap<String, Tensor>)> {
    if bytes.len() < 4 + 4 + 32 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::corrupt(path, "not a checkpoint file"));
    }
    let (body, stored) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader { bytes: body, pos: 4, path };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let found = Sha256::digest(body);
    if found.as_slice() != stored {
        return Err(Error::ChecksumMismatch {
            path: path.to_path_buf(),
            expected: hex::encode(stored),
            found: hex::encode(found),
        });
    }
    let meta_len = r.len()?;
    let meta = String::from_utf8(r.take(meta_len)?.to_vec())
        .map_err(|_| Error::corrupt(path, "metadata is not UTF-8"))?;
    let count = r.len()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::corrupt(path, "tensor name is not UTF-8"))?;
        let rows = r.len()?;
        let cols = r.len()?;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.saturating_mul(8) <= body.len())
            .ok_or_else(|| Error::corrupt(path, "implausible tensor shape"))?;
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.insert(name, Tensor::new(rows, cols, data)?);
    }
    if r.pos != body.len() {
        return Err(Error::corrupt(path, "trailing bytes"));
    }
    Ok((meta, tensors))
}

pub fn write_named_tensors(path: &Path, meta: &str, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_named_tensors(meta, tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_named_tensors(path: &Path) -> Result<(String, BTreeMap<String, Tensor>)> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    decode_named_tensors(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BTreeMap<String, Tensor> {
        BTreeMap::from([
            ("b".to_string(), Tensor::row(vec![1.5, -2.0])),
            ("a".to_string(), Tensor::new(2, 2, vec![0.1, 0.2, 0.3, f64::MIN_POSITIVE]).unwrap()),
        ])
    }

    #[test]
    fn round_trip_and_stable_bytes() {
        let bytes = encode_named_tensors("{\"k\":1}", &sample());
        assert_eq!(bytes, encode_named_tensors("{\"k\":1}", &sample()));
        let (meta, t) = decode_named_tensors(&bytes, Path::new("x")).unwrap();
        assert_eq!(meta, "{\"k\":1}");
        assert_eq!(t, sample());
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode_named_tensors("", &sample());
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        assert!(matches!(
            decode_named_tensors(&bytes, Path::new("x")),
            Err(Error::ChecksumMismatch { .. })
        ));
        let good = encode_named_tensors("", &sample());
        assert!(matches!(
            decode_named_tensors(&good[..20], Path::new("x")),
            Err(Error::CorruptFile { .. })
        ));
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(
            decode_named_tensors(&v2, Path::new("x")),
            Err(Error::VersionMismatch { found: 2, .. })
        ));
    }
}
