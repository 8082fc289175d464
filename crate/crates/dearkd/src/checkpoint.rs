//! `DKDC` checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! b"DKDC" | version: u32 | count: u32
//! count x { name_len: u32 | name: UTF-8 | dtype: u8 | rank: u32 | extents: rank x u64 | values }
//! echo_len: u32 | echo: UTF-8
//! ```
//!
//! The trailing echo holds the resolved experiment config that produced the
//! tensors, so a checkpoint is enough to rebuild its model.

use std::io::{Read, Write};
use std::path::Path;

use dearkd_core::{DType, Element, ParamStore, Tensor};

use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 4] = b"DKDC";
pub const VERSION: u32 = 1;

/// A stored tensor in its original precision.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    /// The values as `T`; converting between precisions is refused.
    pub fn to_tensor<T: Element>(&self) -> Option<Tensor<T>> {
        (self.dtype() == T::DTYPE).then(|| match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, StoredTensor)>,
    pub config_echo: String,
}

impl Checkpoint {
    /// Every parameter of `store`, trainable or not, in store order.
    pub fn from_store<T: Element>(store: &ParamStore<T>, config_echo: String) -> Self {
        let tensors = store.iter().map(|(_, p)| (p.name.clone(), StoredTensor::from_tensor(&p.value))).collect();
        Checkpoint { tensors, config_echo }
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites every parameter of `store` with the tensor of the same
    /// name. Missing names, shape or dtype differences, and tensors the store
    /// does not know are errors.
    pub fn restore<T: Element>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.tensors.len() != store.len() {
            let stray = self.tensors.iter().find(|(n, _)| store.id(n).is_none()).map(|(n, _)| n.clone());
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model has {} parameters{}",
                self.tensors.len(),
                store.len(),
                stray.map(|n| format!(" (unexpected `{n}`)")).unwrap_or_default()
            )));
        }
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let stored = self.get(&name).ok_or_else(|| Error::Config(format!("checkpoint lacks parameter `{name}`")))?;
            let t = stored.to_tensor::<T>().ok_or_else(|| Error::Config(format!("`{name}` is stored as {:?}, model uses {:?}", stored.dtype(), T::DTYPE)))?;
            store.set_value(id, t)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().tag());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            match t {
                StoredTensor::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                StoredTensor::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        out.extend_from_slice(&(self.config_echo.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_echo.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.error(0, "bad magic, not a DKDC checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let at = r.pos;
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| r.error(at, format!("unknown dtype tag {tag}")))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |n, &e| n.checked_mul(e)).ok_or_else(|| r.error(at, "extent overflow".into()))?;
            let at = r.pos;
            let raw = r.take(numel.checked_mul(dtype.size_of()).ok_or_else(|| r.error(at, "extent overflow".into()))?)?;
            let bad = |e: dearkd_core::Error| r.error(at, format!("tensor `{name}`: {e}"));
            let t = match dtype {
                DType::F32 => StoredTensor::F32(
                    Tensor::new(&shape, raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()).map_err(bad)?,
                ),
                DType::F64 => StoredTensor::F64(
                    Tensor::new(&shape, raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()).map_err(bad)?,
                ),
            };
            tensors.push((name, t));
        }
        let config_echo = r.string()?;
        if r.pos != bytes.len() {
            return Err(r.error(r.pos as u64, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { tensors, config_echo })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).at(dir)?;
        }
        let mut f = std::fs::File::create(path).at(path)?;
        f.write_all(&self.to_bytes()).at(path)?;
        f.sync_all().at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).at(path)?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: impl TryInto<u64>, detail: String) -> Error {
        Error::Format { path: self.path.to_path_buf(), offset: offset.try_into().unwrap_or(u64::MAX), detail }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.error(self.pos as u64, format!("truncated: needs {n} more bytes, {} left", self.bytes.len() - self.pos)));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|e| self.error(at as u64, format!("invalid UTF-8: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            tensors: vec![
                ("a".into(), StoredTensor::F32(Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1 - 0.25))),
                ("b.c".into(), StoredTensor::F64(Tensor::from_f64(&[1], &[f64::MIN_POSITIVE]).unwrap())),
            ],
            config_echo: "seed = 3\n".into(),
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(Checkpoint::from_bytes(&bytes, Path::new("m")).unwrap(), c);
    }

    #[test]
    fn corruption_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes, Path::new("m")), Err(Error::Format { offset: 0, .. })));
        let mut bytes = sample().to_bytes();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        let e = Checkpoint::from_bytes(&bytes, Path::new("m")).unwrap_err();
        assert!(matches!(e, Error::Version { found: 7, expected: VERSION }));
        let msg = e.to_string();
        assert!(msg.contains('7') && msg.contains(&VERSION.to_string()), "{msg}");
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("m")), Err(Error::Format { .. })));
    }
}
