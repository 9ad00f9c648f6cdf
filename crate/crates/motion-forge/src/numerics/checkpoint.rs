//! Named-tensor checkpoint container.
//!
//! Layout: 8-byte magic "MFORGE1\0", u64 little-endian header length, JSON
//! header, then raw little-endian tensor data. The header lists each entry's
//! name, dtype, shape, and byte offset into the data section, plus a free-form
//! JSON `meta` value. Writing is canonical (entries in given order, offsets
//! packed), so save→load→save reproduces files byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MFORGE1\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FileHeader {
    entries: Vec<EntryHeader>,
    meta: serde_json::Value,
}

/// One named tensor; values are held as f64 regardless of storage dtype.
#[derive(Debug, Clone)]
pub struct Entry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint { entries: Vec::new(), meta }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>, dtype: Dtype) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(Entry { name: name.into(), dtype, shape: shape.to_vec(), data });
    }

    pub fn find(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut offset = 0u64;
        let headers: Vec<EntryHeader> = self
            .entries
            .iter()
            .map(|e| {
                let h = EntryHeader {
                    name: e.name.clone(),
                    dtype: e.dtype,
                    shape: e.shape.clone(),
                    offset,
                };
                offset += (e.data.len() * e.dtype.size()) as u64;
                h
            })
            .collect();
        let header = FileHeader { entries: headers, meta: self.meta.clone() };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;

        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(header_json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&header_json).map_err(io)?;
        for e in &self.entries {
            match e.dtype {
                Dtype::F64 => {
                    for v in &e.data {
                        w.write_all(&v.to_le_bytes()).map_err(io)?;
                    }
                }
                Dtype::F32 => {
                    for v in &e.data {
                        w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
                    }
                }
            }
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = BufReader::new(file);
        let io = |e: std::io::Error| Error::io(path.display().to_string(), e);

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{} is not a MFORGE1 checkpoint",
                path.display()
            )));
        }
        let mut len8 = [0u8; 8];
        r.read_exact(&mut len8).map_err(io)?;
        let header_len = u64::from_le_bytes(len8) as usize;
        let mut header_json = vec![0u8; header_len];
        r.read_exact(&mut header_json).map_err(io)?;
        let header: FileHeader = serde_json::from_slice(&header_json)
            .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;

        let mut raw = Vec::new();
        r.read_to_end(&mut raw).map_err(io)?;

        let mut entries = Vec::with_capacity(header.entries.len());
        for h in header.entries {
            let count: usize = h.shape.iter().product();
            let bytes = count * h.dtype.size();
            let start = h.offset as usize;
            let end = start + bytes;
            if end > raw.len() {
                return Err(Error::Checkpoint(format!(
                    "entry {} overruns data section ({} > {})",
                    h.name,
                    end,
                    raw.len()
                )));
            }
            let slice = &raw[start..end];
            let data: Vec<f64> = match h.dtype {
                Dtype::F64 => slice
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
                Dtype::F32 => slice
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect(),
            };
            entries.push(Entry { name: h.name, dtype: h.dtype, shape: h.shape, data });
        }
        Ok(Checkpoint { entries, meta: header.meta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_save_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut ck = Checkpoint::new(serde_json::json!({"seed": 7, "note": "roundtrip"}));
        ck.push("a.weight", &[2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-9, 4.75], Dtype::F64);
        ck.push("b.bias", &[2], vec![0.5, -0.125], Dtype::F32);

        let p1 = dir.path().join("one.mforge");
        let p2 = dir.path().join("two.mforge");
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.meta["seed"], 7);
        assert_eq!(loaded.find("a.weight").unwrap().data[2], 3.25);
    }

    #[test]
    fn f32_round_trips_through_storage_precision() {
        let dir = tempfile::tempdir().unwrap();
        let mut ck = Checkpoint::new(serde_json::Value::Null);
        ck.push("x", &[1], vec![0.1], Dtype::F32);
        let p = dir.path().join("f32.mforge");
        ck.save(&p).unwrap();
        let loaded = Checkpoint::load(&p).unwrap();
        assert_eq!(loaded.find("x").unwrap().data[0], 0.1f32 as f64);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bogus.mforge");
        std::fs::write(&p, b"NOTMAGIC________").unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Checkpoint(_))));
    }
}
