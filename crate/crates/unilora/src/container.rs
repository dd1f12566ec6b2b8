//! Flat binary container for named tensors.
//!
//! Layout: a fixed 16-byte header (magic, version, dtype), a length-prefixed
//! UTF-8 JSON metadata record, a length-prefixed manifest of
//! `(name, rows, cols, byte offset)` entries, then the raw little-endian
//! scalar payloads. The same container carries base weights, adapter files,
//! and migration bundles; only the metadata record differs.

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::scalar::{Dtype, Scalar};
use crate::tensor::Matrix;

const MAGIC: [u8; 8] = *b"ULORAC1\0";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic: not a tensor container")]
    BadMagic,
    #[error("unsupported container version {0}")]
    BadVersion(u32),
    #[error("container holds {found:?} payloads, expected {expected:?}")]
    DtypeMismatch { expected: Dtype, found: Dtype },
    #[error("truncated container (wanted {wanted} bytes at offset {offset})")]
    Truncated { offset: usize, wanted: usize },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("metadata is not valid UTF-8")]
    BadMetadata,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Ordered collection of named matrices plus one JSON metadata string.
#[derive(Debug, Clone)]
pub struct TensorContainer<S> {
    metadata: String,
    entries: Vec<(String, Matrix<S>)>,
}

impl<S: Scalar> Default for TensorContainer<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> TensorContainer<S> {
    pub fn new() -> Self {
        TensorContainer {
            metadata: String::new(),
            entries: Vec::new(),
        }
    }

    pub fn with_metadata(metadata: String) -> Self {
        TensorContainer {
            metadata,
            entries: Vec::new(),
        }
    }

    pub fn metadata(&self) -> &str {
        &self.metadata
    }

    pub fn set_metadata(&mut self, metadata: String) {
        self.metadata = metadata;
    }

    pub fn insert(&mut self, name: impl Into<String>, m: Matrix<S>) {
        let name = name.into();
        assert!(
            self.get(&name).is_none(),
            "tensor {name:?} already present in container"
        );
        self.entries.push((name, m));
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<S>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }

    pub fn take(&mut self, name: &str) -> Option<Matrix<S>> {
        let idx = self.entries.iter().position(|(n, _)| n == name)?;
        Some(self.entries.remove(idx).1)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(S::DTYPE.code());
        out.extend_from_slice(&[0u8; 3]);
        debug_assert_eq!(out.len(), 16);

        let meta = self.metadata.as_bytes();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta);

        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut payload_offset = 0u64;
        for (name, m) in &self.entries {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            out.extend_from_slice(&payload_offset.to_le_bytes());
            payload_offset += (m.rows() * m.cols() * S::DTYPE.size_bytes()) as u64;
        }
        for (_, m) in &self.entries {
            for &v in m.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.read(8)?;
        if magic != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = u32::from_le_bytes(cur.read(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(ContainerError::BadVersion(version));
        }
        let dtype_code = cur.read(1)?[0];
        let found = Dtype::from_code(dtype_code).ok_or(ContainerError::BadMagic)?;
        if found != S::DTYPE {
            return Err(ContainerError::DtypeMismatch {
                expected: S::DTYPE,
                found,
            });
        }
        cur.read(3)?; // padding

        let meta_len = u32::from_le_bytes(cur.read(4)?.try_into().unwrap()) as usize;
        let metadata = String::from_utf8(cur.read(meta_len)?.to_vec())
            .map_err(|_| ContainerError::BadMetadata)?;

        let count = u32::from_le_bytes(cur.read(4)?.try_into().unwrap()) as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(cur.read(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(cur.read(name_len)?.to_vec())
                .map_err(|_| ContainerError::BadMetadata)?;
            let rows = u32::from_le_bytes(cur.read(4)?.try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(cur.read(4)?.try_into().unwrap()) as usize;
            let offset = u64::from_le_bytes(cur.read(8)?.try_into().unwrap());
            manifest.push((name, rows, cols, offset));
        }

        let payload_base = cur.pos;
        let elem = S::DTYPE.size_bytes();
        let mut entries: Vec<(String, Matrix<S>)> = Vec::with_capacity(count);
        for (name, rows, cols, offset) in manifest {
            if entries.iter().any(|(n, _)| *n == name) {
                return Err(ContainerError::DuplicateName(name));
            }
            let start = payload_base + offset as usize;
            let wanted = rows * cols * elem;
            let end = start + wanted;
            if end > bytes.len() {
                return Err(ContainerError::Truncated {
                    offset: start,
                    wanted,
                });
            }
            let mut data = Vec::with_capacity(rows * cols);
            for i in 0..rows * cols {
                data.push(S::read_le(&bytes[start + i * elem..]));
            }
            entries.push((name, Matrix::from_vec(rows, cols, data)));
        }
        Ok(TensorContainer { metadata, entries })
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<(), ContainerError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self, ContainerError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn read(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        if self.pos + n > self.bytes.len() {
            return Err(ContainerError::Truncated {
                offset: self.pos,
                wanted: n,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}
