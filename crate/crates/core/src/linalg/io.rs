//! On-disk formats.
//!
//! Matrix record (all integers little-endian):
//!
//! ```text
//! offset  size        field
//! 0       8           magic  b"LSPMAT01"
//! 8       8           rows   u64
//! 16      8           cols   u64
//! 24      8*rows*cols payload, row-major f64
//! ```
//!
//! Bundle (a checkpoint or a set of named update matrices):
//!
//! ```text
//! 0       8           magic  b"LSPBND01"
//! 8       8           header length H, u64
//! 16      H           UTF-8 JSON {"kind", "meta", "tensors": [{"name","rows","cols"}]}
//! 16+H    ...         one matrix record per header entry, in header order
//! ```
//!
//! CSV export writes one matrix row per line using the shortest decimal
//! representation that round-trips, so finite values survive exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

pub const MATRIX_MAGIC: &[u8; 8] = b"LSPMAT01";
pub const BUNDLE_MAGIC: &[u8; 8] = b"LSPBND01";

pub fn encode_matrix(m: &Matrix, out: &mut Vec<u8>) {
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated {what}: need {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let start = self.pos;
        if self.take(8, "matrix magic")? != MATRIX_MAGIC {
            self.pos = start;
            return Err(self.fail("bad matrix magic"));
        }
        let rows = self.u64("rows")? as usize;
        let cols = self.u64("cols")? as usize;
        let count = rows
            .checked_mul(cols)
            .filter(|c| c.checked_mul(8).is_some())
            .ok_or_else(|| self.fail("matrix dimensions overflow"))?;
        let payload_start = self.pos;
        let payload = self.take(count * 8, "matrix payload")?;
        let mut data = Vec::with_capacity(count);
        for (i, chunk) in payload.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            if !v.is_finite() {
                self.pos = payload_start + 8 * i;
                return Err(self.fail("non-finite matrix entry"));
            }
            data.push(v);
        }
        Ok(Matrix::from_vec(rows, cols, data).expect("validated above"))
    }
}

/// Decodes a single matrix record that must span all of `bytes`.
pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let mut c = Cursor { bytes, pos: 0, path };
    let m = c.matrix()?;
    if c.pos != bytes.len() {
        return Err(c.fail("trailing bytes after matrix"));
    }
    Ok(m)
}

pub fn save_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut out = Vec::with_capacity(24 + 8 * m.len());
    encode_matrix(m, &mut out);
    fs::write(path, out)?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path)?;
    decode_matrix(&bytes, path)
}

pub fn matrix_to_csv(m: &Matrix) -> String {
    let mut s = String::new();
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

pub fn matrix_from_csv(text: &str) -> Result<Matrix> {
    let mut rows = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        if !line.trim().is_empty() {
            let row = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format {
                    path: PathBuf::from("<csv>"),
                    offset,
                    msg: e.to_string(),
                })?;
            rows.push(row);
        }
        offset += line.len() as u64 + 1;
    }
    Matrix::from_rows(&rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleHeader {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named matrices plus a JSON metadata header.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Matrix>,
}

impl Bundle {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_owned(),
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = BundleHeader {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, m)| TensorEntry {
                    name: n.clone(),
                    rows: m.rows(),
                    cols: m.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for m in self.tensors.values() {
            encode_matrix(m, &mut out);
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0, path };
        if c.take(8, "bundle magic")? != BUNDLE_MAGIC {
            c.pos = 0;
            return Err(c.fail("bad bundle magic"));
        }
        let len = c.u64("header length")? as usize;
        let header_start = c.pos;
        let raw = c.take(len, "bundle header")?;
        let header: BundleHeader = serde_json::from_slice(raw).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: header_start as u64 + e.column() as u64,
            msg: format!("bad bundle header: {e}"),
        })?;
        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let start = c.pos;
            let m = c.matrix()?;
            if m.shape() != (entry.rows, entry.cols) {
                c.pos = start;
                return Err(c.fail(format!(
                    "tensor {} has shape {:?}, header says {:?}",
                    entry.name,
                    m.shape(),
                    (entry.rows, entry.cols)
                )));
            }
            tensors.insert(entry.name, m);
        }
        if c.pos != bytes.len() {
            return Err(c.fail("trailing bytes after last tensor"));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: e.to_string(),
        })?;
        Self::decode(&bytes, path)
    }
}
