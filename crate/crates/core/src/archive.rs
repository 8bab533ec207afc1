//! Binary tensor archive used for checkpoints and exported frozen weights.
//!
//! Layout (little-endian): magic `PSGA`, format version `u32`, JSON header
//! length `u32` followed by UTF-8 JSON, tensor count `u32`, then per tensor:
//! name length `u32`, UTF-8 name, rank `u32`, `rank × u64` dims, and the
//! `f32` values in row-major order.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PSGA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Archive {
    pub header: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new(header: serde_json::Value) -> Self {
        Self {
            header,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        let header = serde_json::to_vec(&self.header)?;
        w.write_u32::<LittleEndian>(header.len() as u32)?;
        w.write_all(&header)?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.rank() as u32)?;
            for d in t.dims() {
                w.write_u64::<LittleEndian>(*d as u64)?;
            }
            let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            for v in values {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bad = |m: String| Error::CheckpointError(format!("{path:?}: {m}"));
        let mut r = BufReader::new(fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
        if &magic != MAGIC {
            return Err(bad("not a tensor archive".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let hlen = r.read_u32::<LittleEndian>()? as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf)?;
        let header: serde_json::Value = serde_json::from_slice(&hbuf)?;
        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.read_u32::<LittleEndian>()? as usize;
            let mut nbuf = vec![0u8; nlen];
            r.read_exact(&mut nbuf)?;
            let name = String::from_utf8(nbuf).map_err(|e| bad(e.to_string()))?;
            let rank = r.read_u32::<LittleEndian>()? as usize;
            let dims = (0..rank)
                .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let mut values = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut values)
                .map_err(|e| bad(format!("tensor {name}: {e}")))?;
            tensors.push((name, Tensor::from_vec(values, dims, &Device::Cpu)?));
        }
        Ok(Self { header, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.psga");
        let mut a = Archive::new(serde_json::json!({"k": 1}));
        a.push("w", Tensor::new(&[[1f32, 2.], [3., 4.]], &Device::Cpu).unwrap());
        a.push("s", Tensor::new(5f32, &Device::Cpu).unwrap());
        a.write(&p).unwrap();
        let b = Archive::read(&p).unwrap();
        assert_eq!(b.header["k"], 1);
        assert_eq!(b.get("w").unwrap().to_vec2::<f32>().unwrap(), vec![vec![1., 2.], vec![3., 4.]]);
        assert_eq!(b.get("s").unwrap().dims(), &[] as &[usize]);
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        fs::write(&p, b"nope").unwrap();
        assert!(matches!(Archive::read(&p), Err(Error::CheckpointError(_))));
    }
}
