//! The VSTM1 embedding container.
//!
//! ```text
//! "VSTM1"  u16 version  u64 N  u32 D  u8 has_ids
//! N·D f32 row-major
//! if has_ids: (N+1) u64 offsets into the id blob, then the UTF-8 blob
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::HashSet;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 5] = b"VSTM1";
pub const CONTAINER_VERSION: u16 = 1;
const HEADER_LEN: usize = 5 + 2 + 8 + 4 + 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingContainer {
    pub n: usize,
    pub d: usize,
    /// Row-major N·D values.
    pub values: Vec<f32>,
    pub ids: Option<Vec<String>>,
}

impl EmbeddingContainer {
    pub fn new(n: usize, d: usize, values: Vec<f32>, ids: Option<Vec<String>>) -> Result<Self> {
        let c = EmbeddingContainer { n, d, values, ids };
        c.validate()?;
        Ok(c)
    }

    pub fn from_array(m: &Array2<f64>, ids: Option<Vec<String>>) -> Result<Self> {
        let values = m.iter().map(|&v| v as f32).collect();
        EmbeddingContainer::new(m.nrows(), m.ncols(), values, ids)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d > u32::MAX as usize {
            return Err(Error::Format("D does not fit in 32 bits".into()));
        }
        let expected = self.n.checked_mul(self.d).ok_or_else(|| Error::Format("N·D overflows".into()))?;
        if self.values.len() != expected {
            return Err(Error::Format(format!(
                "payload holds {} values, expected N·D = {expected}",
                self.values.len()
            )));
        }
        if let Some(ids) = &self.ids {
            if ids.len() != self.n {
                return Err(Error::Format(format!("{} ids for {} rows", ids.len(), self.n)));
            }
            let mut seen = HashSet::with_capacity(ids.len());
            for id in ids {
                if !seen.insert(id.as_str()) {
                    return Err(Error::Format(format!("duplicate id {id:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.n, self.d), |(i, j)| self.values[i * self.d + j] as f64)
    }

    /// Row i as f64.
    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values[i * self.d..(i + 1) * self.d].iter().map(|&v| v as f64).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.write_all(CONTAINER_MAGIC)?;
        out.write_u16::<LE>(CONTAINER_VERSION)?;
        out.write_u64::<LE>(self.n as u64)?;
        out.write_u32::<LE>(self.d as u32)?;
        out.write_u8(self.ids.is_some() as u8)?;
        for &v in &self.values {
            out.write_f32::<LE>(v)?;
        }
        if let Some(ids) = &self.ids {
            let mut offset = 0u64;
            out.write_u64::<LE>(0)?;
            for id in ids {
                offset += id.len() as u64;
                out.write_u64::<LE>(offset)?;
            }
            for id in ids {
                out.write_all(id.as_bytes())?;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "file has {} bytes, shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if &bytes[..5] != CONTAINER_MAGIC {
            return Err(Error::Format("bad magic: not a VSTM1 container".into()));
        }
        let mut r = Cursor::new(&bytes[5..]);
        let version = r.read_u16::<LE>()?;
        if version != CONTAINER_VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let n = r.read_u64::<LE>()?;
        let d = r.read_u32::<LE>()? as u64;
        let has_ids = match r.read_u8()? {
            0 => false,
            1 => true,
            f => return Err(Error::Format(format!("invalid id flag {f}"))),
        };
        let payload = n
            .checked_mul(d)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::Format("N·D overflows".into()))?;
        let rest = (bytes.len() - HEADER_LEN) as u64;
        if rest < payload {
            return Err(Error::Format(format!(
                "truncated payload: {rest} bytes present, N·D·4 = {payload} required"
            )));
        }
        let (n, d) = (n as usize, d as usize);
        let mut values = vec![0f32; n * d];
        r.read_f32_into::<LE>(&mut values)?;
        let tail = &bytes[HEADER_LEN + payload as usize..];
        let ids = if has_ids {
            Some(read_ids(tail, n)?)
        } else {
            if !tail.is_empty() {
                return Err(Error::Format(format!(
                    "{} trailing bytes after the payload",
                    tail.len()
                )));
            }
            None
        };
        EmbeddingContainer::new(n, d, values, ids)
    }
}

fn read_ids(tail: &[u8], n: usize) -> Result<Vec<String>> {
    let table = (n as u64 + 1) * 8;
    if (tail.len() as u64) < table {
        return Err(Error::Format("truncated id offset table".into()));
    }
    let mut r = Cursor::new(tail);
    let mut offsets = vec![0u64; n + 1];
    r.read_u64_into::<LE>(&mut offsets)?;
    let blob = &tail[table as usize..];
    if offsets[0] != 0 || offsets.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Format("id offsets are not monotone from zero".into()));
    }
    if offsets[n] != blob.len() as u64 {
        return Err(Error::Format(format!(
            "id blob has {} bytes, offsets require {}",
            blob.len(),
            offsets[n]
        )));
    }
    offsets
        .windows(2)
        .map(|w| {
            std::str::from_utf8(&blob[w[0] as usize..w[1] as usize])
                .map(str::to_owned)
                .map_err(|_| Error::Format("id is not valid UTF-8".into()))
        })
        .collect()
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingContainer> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    EmbeddingContainer::from_bytes(&bytes)
}

pub fn write_embeddings(path: &Path, container: &EmbeddingContainer) -> Result<()> {
    fs::write(path, container.to_bytes()?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EmbeddingContainer {
        EmbeddingContainer::new(
            2,
            3,
            vec![1.0, -2.5, 0.125, 3.0, 1e-7, -0.0],
            Some(vec!["a".into(), "ünï".into()]),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = EmbeddingContainer::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let no_ids = EmbeddingContainer::new(1, 1, vec![2.0], None).unwrap();
        assert_eq!(EmbeddingContainer::from_bytes(&no_ids.to_bytes().unwrap()).unwrap(), no_ids);
    }

    #[test]
    fn rejects_bad_inputs() {
        let bytes = sample().to_bytes().unwrap();
        let err = EmbeddingContainer::from_bytes(&bytes[..HEADER_LEN + 10]).unwrap_err();
        assert!(err.to_string().contains("truncated"));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(EmbeddingContainer::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        assert!(EmbeddingContainer::new(2, 1, vec![0.0, 1.0], Some(vec!["x".into(), "x".into()])).is_err());
        assert!(EmbeddingContainer::new(2, 2, vec![0.0; 3], None).is_err());
    }

    #[test]
    fn empty_container_is_valid() {
        let c = EmbeddingContainer::new(0, 4, vec![], None).unwrap();
        let back = EmbeddingContainer::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.to_array().dim(), (0, 4));
    }
}
