//! Named-tensor container used for models, checkpoints and representations.
//!
//! Layout (little-endian): magic `NCTF`, u32 version, u32 metadata length,
//! metadata as JSON, u32 tensor count, then per tensor a u16 name length,
//! the UTF-8 name, u8 rank, u32 extents and the f32 values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nerfcodec_autodiff::Tensor;

use crate::error::{io_err, CodecError, Result};

const MAGIC: &[u8; 4] = b"NCTF";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("string map serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: &str| CodecError::Parse {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok_or_else(|| bad("truncated"))? != MAGIC {
            return Err(bad("not a tensor file"));
        }
        if r.u32().ok_or_else(|| bad("truncated"))? != VERSION {
            return Err(bad("unsupported tensor file version"));
        }
        let n = r.u32().ok_or_else(|| bad("truncated"))? as usize;
        let meta: BTreeMap<String, String> =
            serde_json::from_slice(r.take(n).ok_or_else(|| bad("truncated metadata"))?)
                .map_err(|e| bad(&e.to_string()))?;
        let count = r.u32().ok_or_else(|| bad("truncated"))? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16().ok_or_else(|| bad("truncated"))? as usize;
            let name = std::str::from_utf8(r.take(len).ok_or_else(|| bad("truncated"))?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.take(1).ok_or_else(|| bad("truncated"))?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32().ok_or_else(|| bad("truncated"))? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4).ok_or_else(|| bad("truncated tensor data"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(shape, data).expect("extent product checked")));
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes, path)
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    pub fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    pub fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn i32(&mut self) -> Option<i32> {
        self.take(4).map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32(&mut self) -> Option<f32> {
        self.take(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Every parameter of `m` as a named tensor.
pub fn module_tensors(m: &dyn crate::param::Module) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.visit(&mut |p| out.push((p.name().to_string(), p.value().clone())));
    out
}

/// Overwrites every parameter of `m` with the same-named tensor of `file`.
pub fn assign(m: &mut dyn crate::param::Module, file: &TensorFile) -> Result<()> {
    let mut err = None;
    m.visit_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        match file.get(p.name()) {
            Some(t) => {
                if let Err(e) = p.set(t.clone()) {
                    err = Some(e);
                }
            }
            None => err = Some(CodecError::Config(format!("missing tensor {}", p.name()))),
        }
    });
    err.map_or(Ok(()), Err)
}
