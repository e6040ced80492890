//! Binary tensor archive.
//!
//! Layout: `PICO`, version `u32 = 1`, tensor count `u32`, then per tensor
//! `u16` name length, UTF-8 name, `u8` rank, `u32` dims, little-endian `f32`
//! payload. A UTF-8 block of `key=value` lines follows the last tensor.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PICO";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: BTreeMap<String, String>,
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated archive: need {n} bytes at offset {}",
                self.at
            )));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_store(store: &ParamStore) -> Self {
        Self {
            tensors: store
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            meta: BTreeMap::new(),
        }
    }

    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, t) in &self.tensors {
            s.insert(name.clone(), t.clone());
        }
        s
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::Format(format!("rank too large for {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Format(format!("bad metadata entry `{k}`")));
            }
            out.extend_from_slice(format!("{k}={v}\n").as_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Format(format!("tensor name: {e}")))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        let trailer = std::str::from_utf8(&buf[r.at..])
            .map_err(|e| Error::Format(format!("metadata block: {e}")))?;
        let mut meta = BTreeMap::new();
        for line in trailer.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad metadata line `{line}`")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        Ok(Self { tensors, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Format(format!("missing metadata `{key}`")))?;
        v.parse()
            .map_err(|_| Error::Format(format!("metadata `{key}` is not a number: {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut c = Checkpoint::new();
        c.push("a.weight", Tensor::new(&[2, 3], vec![0.1, -2.5, 3e-8, f32::MAX, 0.0, -0.0]).unwrap());
        c.push("b", Tensor::scalar(7.0));
        c.meta.insert("tau".into(), "0.125".into());
        c.meta.insert("alpha_dir".into(), "0.2".into());
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.tensors.len(), 2);
        for ((n1, t1), (n2, t2)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        assert_eq!(back.meta, c.meta);
        assert_eq!(back.meta_f64("tau").unwrap(), 0.125);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(Checkpoint::from_bytes(b"NOPE\x01\0\0\0"), Err(Error::Format(_))));
        let mut c = Checkpoint::new();
        c.push("x", Tensor::zeros(&[4]));
        let bytes = c.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
