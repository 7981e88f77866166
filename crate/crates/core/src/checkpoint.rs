//! Self-describing binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"ILLUMFLD"        8 bytes
//! version u32
//! header  u32 length + UTF-8 text, one `key=value` per line
//! count   u32
//! tensor  u32 name length, name, u8 dtype (0 = f32, 1 = f64),
//!         u32 rows, u32 cols, rows*cols IEEE-754 values (row-major)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tape::Real;

pub const MAGIC: &[u8; 8] = b"ILLUMFLD";
pub const VERSION: u32 = 1;

pub const DTYPE_F32: u8 = 0;
pub const DTYPE_F64: u8 = 1;

/// A named matrix together with the precision it is stored at.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dtype: u8,
    pub data: Array2<f64>,
}

impl Tensor {
    pub fn from_array<T: Real>(a: &Array2<T>) -> Self {
        Tensor {
            dtype: T::DTYPE,
            data: a.mapv(|v| v.as_f64()),
        }
    }

    pub fn to_array<T: Real>(&self) -> Array2<T> {
        self.data.mapv(T::lit)
    }
}

/// Header text plus an ordered set of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub header: BTreeMap<String, String>,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.header.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing header key {key:?}")))
    }

    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("bad value {raw:?} for {key:?}")))
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        match self.tensors.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.tensors.push((name.to_string(), tensor)),
        }
    }

    pub fn insert_array<T: Real>(&mut self, name: &str, a: &Array2<T>) {
        self.insert(name, Tensor::from_array(a));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    pub fn array<T: Real>(&self, name: &str) -> Result<Array2<T>> {
        Ok(self.tensor(name)?.to_array())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    /// Tensors whose names start with `prefix`.
    pub fn with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.tensors
            .iter()
            .filter(move |(n, _)| n.starts_with(prefix))
            .map(|(n, t)| (n.as_str(), t))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut header = String::new();
        for (k, v) in &self.header {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Checkpoint(format!(
                    "header entry {k:?} is not representable"
                )));
            }
            header.push_str(&format!("{k}={v}\n"));
        }
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype);
            let (r, c) = t.data.dim();
            out.extend_from_slice(&(r as u32).to_le_bytes());
            out.extend_from_slice(&(c as u32).to_le_bytes());
            for v in t.data.iter() {
                match t.dtype {
                    DTYPE_F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
                    DTYPE_F64 => out.extend_from_slice(&v.to_le_bytes()),
                    other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let mut header = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad header line {line:?}")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let width = match dtype {
                DTYPE_F32 => 4,
                DTYPE_F64 => 8,
                other => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name:?} has unknown dtype {other}"
                    )))
                }
            };
            let raw = r.take(rows * cols * width)?;
            let values: Vec<f64> = raw
                .chunks_exact(width)
                .map(|c| match dtype {
                    DTYPE_F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                    _ => f64::from_le_bytes(c.try_into().expect("8 bytes")),
                })
                .collect();
            let data = Array2::from_shape_vec((rows, cols), values)
                .map_err(|e| Error::Checkpoint(format!("tensor {name:?}: {e}")))?;
            tensors.push((name, Tensor { dtype, data }));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let mut ck = Checkpoint::new();
        ck.set("mode", "so2");
        ck.set("n", 9);
        ck.insert_array(
            "a",
            &Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f32 * 0.1),
        );
        ck.insert_array("b", &Array2::from_elem((1, 1), std::f64::consts::PI));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.parse::<usize>("n").unwrap(), 9);
        assert_eq!(back.tensor("a").unwrap().dtype, DTYPE_F32);
        assert_eq!(
            back.array::<f64>("b").unwrap()[(0, 0)],
            std::f64::consts::PI
        );
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut ck = Checkpoint::new();
        ck.insert_array("a", &Array2::<f64>::zeros((2, 2)));
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(ck.tensor("missing").is_err());
    }
}
