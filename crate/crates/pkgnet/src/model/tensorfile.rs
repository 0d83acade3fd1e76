//! Single-file tensor archive used for checkpoints and teacher weights.
//!
//! Layout (little-endian):
//! `"PKGT" | version:u32 | meta_len:u32 | meta (JSON) | n_tensors:u32 |`
//! then per tensor: `name_len:u16 | name | ndim:u8 | dims:u32* | data:f32*`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PKGT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug)]
pub struct TensorArchive {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, ArrayD<f32>>,
}

pub fn write(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &BTreeMap<String, ArrayD<f32>>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
    let meta_bytes = serde_json::to_vec(meta).expect("meta serializes");
    w.write_all(&(meta_bytes.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&meta_bytes).map_err(io_err)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(io_err)?;
    for (name, t) in tensors {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u16).to_le_bytes()).map_err(io_err)?;
        w.write_all(nb).map_err(io_err)?;
        w.write_all(&[t.ndim() as u8]).map_err(io_err)?;
        for d in t.shape() {
            w.write_all(&(*d as u32).to_le_bytes()).map_err(io_err)?;
        }
        let data = t.as_slice().expect("tensors must be standard layout");
        // Bulk little-endian write; f32 bit patterns are preserved exactly.
        let mut buf = Vec::with_capacity(data.len() * 4);
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<TensorArchive> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let truncated = || Error::Archive(format!("{}: truncated archive", path.display()));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| truncated())?;
    if &magic != MAGIC {
        return Err(Error::Archive(format!(
            "{}: not a pkgnet tensor archive (bad magic)",
            path.display()
        )));
    }
    let version = read_u32(&mut r).ok_or_else(truncated)?;
    if version != FORMAT_VERSION {
        return Err(Error::Archive(format!(
            "{}: unsupported archive version {version} (expected {FORMAT_VERSION})",
            path.display()
        )));
    }
    let meta_len = read_u32(&mut r).ok_or_else(truncated)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes).map_err(|_| truncated())?;
    let meta: serde_json::Value = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Archive(format!("{}: bad meta json: {e}", path.display())))?;

    let n_tensors = read_u32(&mut r).ok_or_else(truncated)? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..n_tensors {
        let mut nl = [0u8; 2];
        r.read_exact(&mut nl).map_err(|_| truncated())?;
        let mut name_bytes = vec![0u8; u16::from_le_bytes(nl) as usize];
        r.read_exact(&mut name_bytes).map_err(|_| truncated())?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Archive(format!("{}: non-utf8 tensor name", path.display())))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim).map_err(|_| truncated())?;
        let mut dims = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            dims.push(read_u32(&mut r).ok_or_else(truncated)? as usize);
        }
        let len: usize = dims.iter().product();
        let mut raw = vec![0u8; len * 4];
        r.read_exact(&mut raw).map_err(|_| truncated())?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::Archive(format!("{}: bad tensor {name}: {e}", path.display())))?;
        tensors.insert(name, arr);
    }
    Ok(TensorArchive { meta, tensors })
}

fn read_u32(r: &mut impl Read) -> Option<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).ok()?;
    Some(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn roundtrip_preserves_bits_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pkgt");
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "a.w".to_string(),
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.5, -0.25, 3.25e-8, 0.0, -0.0, f32::MIN_POSITIVE]).unwrap(),
        );
        tensors.insert("b".to_string(), ArrayD::from_elem(IxDyn(&[1]), 42.0f32));
        let meta = json!({"kind": "test", "epoch": 3});
        write(&path, &meta, &tensors).unwrap();
        let back = read(&path).unwrap();
        assert_eq!(back.meta["epoch"], 3);
        assert_eq!(back.tensors.len(), 2);
        for (k, v) in &tensors {
            let got = &back.tensors[k];
            assert_eq!(got.shape(), v.shape());
            for (x, y) in got.iter().zip(v.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pkgt");
        std::fs::write(&path, b"NOPE").unwrap();
        let err = read(&path).unwrap_err();
        assert!(err.to_string().contains("truncated") || err.to_string().contains("magic"));

        let path2 = dir.path().join("badver.pkgt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"PKGT");
        bytes.extend_from_slice(&99u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(b"{}");
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path2, bytes).unwrap();
        let err = read(&path2).unwrap_err();
        assert!(err.to_string().contains("unsupported archive version 99"), "{err}");
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pkgt");
        let mut tensors = BTreeMap::new();
        tensors.insert("w".to_string(), ArrayD::from_elem(IxDyn(&[64]), 1.0f32));
        write(&path, &serde_json::Value::Null, &tensors).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 10]).unwrap();
        assert!(matches!(read(&path).unwrap_err(), Error::Archive(_)));
    }
}
