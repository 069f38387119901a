//! The `SAEW` tensor-table file format shared by LM, SAE, adapter and
//! activation-shard files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"SAEW" | version: u32
//! repeated until EOF:
//!   name_len: u32 | name: UTF-8 bytes
//!   dtype: u8 (0 = f64) | rank: u32 | dims: u64 × rank
//!   payload: f64 × Π dims, row-major
//! ```
//!
//! Matrices are stored at rank 2, bias vectors at rank 1 and metadata at
//! rank 0 (one value).

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"SAEW";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a SAEW file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint format version {found} (this build reads version {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("tensor {name:?} has unsupported dtype code {code}")]
    UnsupportedDtype { name: String, code: u8 },
    #[error("truncated or malformed tensor table: {0}")]
    Malformed(String),
    #[error("missing tensor {0:?}")]
    Missing(String),
    #[error("tensor {name:?} has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<u64>,
        found: Vec<u64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

/// An ordered tensor table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn push(&mut self, entry: TensorEntry) {
        if let Some(slot) = self.entries.iter_mut().find(|e| e.name == entry.name) {
            *slot = entry;
        } else {
            self.entries.push(entry);
        }
    }

    pub fn push_matrix(&mut self, name: impl Into<String>, m: &Matrix) {
        self.push(TensorEntry {
            name: name.into(),
            dims: vec![m.rows() as u64, m.cols() as u64],
            data: m.data().to_vec(),
        });
    }

    /// Stores a `(1, n)` matrix as a rank-1 tensor.
    pub fn push_vector(&mut self, name: impl Into<String>, m: &Matrix) {
        self.push(TensorEntry {
            name: name.into(),
            dims: vec![m.len() as u64],
            data: m.data().to_vec(),
        });
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.push(TensorEntry {
            name: name.into(),
            dims: vec![],
            data: vec![v],
        });
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn require(&self, name: &str) -> Result<&TensorEntry, CheckpointError> {
        self.get(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    /// Rank-2 tensors map directly; rank-1 tensors become `(1, n)`.
    pub fn matrix(&self, name: &str) -> Result<Matrix, CheckpointError> {
        let e = self.require(name)?;
        match e.dims.as_slice() {
            [r, c] => Ok(Matrix::from_vec(*r as usize, *c as usize, e.data.clone())),
            [n] => Ok(Matrix::from_vec(1, *n as usize, e.data.clone())),
            _ => Err(CheckpointError::Shape {
                name: name.to_string(),
                expected: vec![0, 0],
                found: e.dims.clone(),
            }),
        }
    }

    /// Like [`matrix`](Self::matrix) but also checks the shape.
    pub fn matrix_shaped(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix, CheckpointError> {
        let m = self.matrix(name)?;
        if m.shape() != (rows, cols) {
            return Err(CheckpointError::Shape {
                name: name.to_string(),
                expected: vec![rows as u64, cols as u64],
                found: self.require(name)?.dims.clone(),
            });
        }
        Ok(m)
    }

    pub fn scalar(&self, name: &str) -> Result<f64, CheckpointError> {
        let e = self.require(name)?;
        if !e.dims.is_empty() {
            return Err(CheckpointError::Shape {
                name: name.to_string(),
                expected: vec![],
                found: e.dims.clone(),
            });
        }
        Ok(e.data[0])
    }

    pub fn scalar_or(&self, name: &str, default: f64) -> Result<f64, CheckpointError> {
        match self.get(name) {
            None => Ok(default),
            Some(_) => self.scalar(name),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[DTYPE_F64])?;
            w.write_all(&(e.dims.len() as u32).to_le_bytes())?;
            for d in &e.dims {
                w.write_all(&d.to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(e.data.len() * 8);
            for v in &e.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut cur = Cursor { buf: bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4)?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let mut entries = Vec::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let code = cur.take(1)?[0];
            if code != DTYPE_F64 {
                return Err(CheckpointError::UnsupportedDtype { name, code });
            }
            let rank = cur.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cur.u64()?);
            }
            let count = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Malformed(format!("{name}: dims overflow")))?;
            let payload = cur.take(
                (count as usize)
                    .checked_mul(8)
                    .ok_or_else(|| CheckpointError::Malformed(format!("{name}: payload overflow")))?,
            )?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.push(TensorEntry { name, dims, data });
        }
        Ok(Self { entries })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io_err = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(io_err)?;
            }
        }
        let tmp = path.with_extension("saew.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(io_err)?;
        fs::rename(&tmp, path).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| CheckpointError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                CheckpointError::Malformed(format!(
                    "wanted {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
