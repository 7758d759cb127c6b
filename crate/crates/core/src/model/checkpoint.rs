//! Binary checkpoint container.
//!
//! Layout (little-endian): `b"STLR"`, `u32` version, then per record a `u32`
//! name length, the UTF-8 name, a `u32` rank, `rank` `u32` dims and the
//! row-major `f32` payload. A CRC32 of every preceding byte closes the file.

use std::fs;
use std::path::Path;

use crate::error::{Result, StellarError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"STLR";
pub const VERSION: u32 = 1;

pub fn encode_records(records: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in records {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
}

pub fn decode_records(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor<f32>)>, String> {
    if bytes.len() < 12 {
        return Err("file too short".into());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
    if crc32fast::hash(body) != stored {
        return Err("CRC mismatch".into());
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let mut out = Vec::new();
    while r.pos < body.len() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| "record name is not UTF-8".to_string())?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let count: usize = shape.iter().product();
        let payload = r.take(count.checked_mul(4).ok_or("payload size overflows")?)?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
        out.push((name.to_string(), Tensor::new(shape, data)));
    }
    Ok(out)
}

/// Writes through a temporary sibling and renames, so a failed write never
/// clobbers the previous file.
pub fn write_checkpoint(path: &Path, records: &[(String, Tensor<f32>)]) -> Result<()> {
    let bytes = encode_records(records);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path).map_err(|e| StellarError::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode_records(&bytes).map_err(|reason| StellarError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor<f32>)> {
        vec![
            ("student.a".into(), Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, f32::MIN_POSITIVE, 7.0])),
            ("teacher.scalar".into(), Tensor::scalar(0.996)),
            ("decoder.empty".into(), Tensor::new(vec![0], vec![])),
        ]
    }

    #[test]
    fn byte_layout() {
        let recs = vec![("ab".to_string(), Tensor::new(vec![1], vec![1.0f32]))];
        let bytes = encode_records(&recs);
        let mut want = b"STLR".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        let crc = crc32fast::hash(&want);
        want.extend_from_slice(&crc.to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.stlr");
        write_checkpoint(&path, &sample()).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), sample());

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[20] ^= 1;
        std::fs::write(&path, &bytes).unwrap();
        let err = read_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("CRC"), "{err}");

        let good = encode_records(&sample());
        assert!(decode_records(&good[..good.len() - 9]).is_err());
        assert!(read_checkpoint(&dir.path().join("missing")).is_err());
    }
}
