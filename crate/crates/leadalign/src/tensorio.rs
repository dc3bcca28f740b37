//! Named-tensor archive: the on-disk format for checkpoints, optimizer
//! state, and embedding dumps.
//!
//! Layout: 8-byte magic, u32 JSON metadata length, metadata bytes, u32
//! tensor count, then per tensor `u16 name_len | name | u8 ndim | ndim x u64
//! dims | f64 little-endian data`. Everything is f64 so round-trips are
//! bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LATENSR1";

#[derive(Debug, Clone)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TensorArchive {
    pub meta: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl TensorArchive {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

pub fn write_archive(path: &Path, archive: &TensorArchive) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let meta = serde_json::to_vec(&archive.meta)?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(archive.tensors.len() as u32).to_le_bytes());
    for t in &archive.tensors {
        let name = t.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(t.dims.len() as u8);
        let mut n = 1usize;
        for &d in &t.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
            n *= d;
        }
        if n != t.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {:?}: dims {:?} but {} values",
                t.name,
                t.dims,
                t.data.len()
            )));
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<TensorArchive> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{}: truncated archive",
                path.display()
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != MAGIC {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{}: bad magic",
            path.display()
        )));
    }
    let meta_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let meta: serde_json::Value = serde_json::from_slice(take(&mut pos, meta_len)?)?;
    let n_tensors = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|e| Error::IncompatibleCheckpoint(format!("bad tensor name: {e}")))?;
        let ndim = take(&mut pos, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        let mut count = 1usize;
        for _ in 0..ndim {
            let d = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            dims.push(d);
            count *= d;
        }
        let raw = take(&mut pos, count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor { name, dims, data });
    }
    Ok(TensorArchive { meta, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        let archive = TensorArchive {
            meta: serde_json::json!({"kind": "test", "seed": 7}),
            tensors: vec![
                Tensor {
                    name: "w".into(),
                    dims: vec![2, 3],
                    data: vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE, 1e300, -0.0],
                },
                Tensor {
                    name: "b".into(),
                    dims: vec![2],
                    data: vec![0.1, 0.2],
                },
            ],
        };
        write_archive(&path, &archive).unwrap();
        let back = read_archive(&path).unwrap();
        assert_eq!(back.meta, archive.meta);
        assert_eq!(back.tensors.len(), 2);
        for (a, b) in archive.tensors.iter().zip(&back.tensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.dims, b.dims);
            let ab: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn truncated_archive_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        let archive = TensorArchive {
            meta: serde_json::json!({}),
            tensors: vec![Tensor {
                name: "w".into(),
                dims: vec![4],
                data: vec![1.0, 2.0, 3.0, 4.0],
            }],
        };
        write_archive(&path, &archive).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            read_archive(&path),
            Err(Error::IncompatibleCheckpoint(_))
        ));
    }
}
