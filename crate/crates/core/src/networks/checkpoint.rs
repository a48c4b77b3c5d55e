//! Versioned little-endian tensor container.
//!
//! ```text
//! "ENDSR" | version u32 | record count u32 |
//!   per record: name length u32 | name utf-8 | dtype u8 | rank u32 | dims u32 × rank | data
//! ```
//! dtype 0 is f32, 1 is f64, 2 is raw bytes (rank 1).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::weights::{NetworkWeights, ParamSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"ENDSR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: RecordData,
}

impl Record {
    pub fn dtype_name(&self) -> &'static str {
        match self.data {
            RecordData::F32(_) => "f32",
            RecordData::F64(_) => "f64",
            RecordData::Bytes(_) => "bytes",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    records: Vec<Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    fn insert(&mut self, rec: Record) {
        if let Some(r) = self.records.iter_mut().find(|r| r.name == rec.name) {
            *r = rec;
        } else {
            self.records.push(rec);
        }
    }

    pub fn put_tensor(&mut self, name: &str, t: &Tensor, precision: Precision) {
        let data = match precision {
            Precision::F32 => RecordData::F32(t.data().iter().map(|&v| v as f32).collect()),
            Precision::F64 => RecordData::F64(t.data().to_vec()),
        };
        self.insert(Record {
            name: name.to_string(),
            dims: t.shape().to_vec(),
            data,
        });
    }

    pub fn put_bytes(&mut self, name: &str, bytes: Vec<u8>) {
        self.insert(Record {
            name: name.to_string(),
            dims: vec![bytes.len()],
            data: RecordData::Bytes(bytes),
        });
    }

    pub fn put_json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let bytes = serde_json::to_vec(value).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        self.put_bytes(name, bytes);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let rec = self
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no record '{name}'")))?;
        let data = match &rec.data {
            RecordData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            RecordData::F64(v) => v.clone(),
            RecordData::Bytes(_) => {
                return Err(Error::Format(format!("record '{name}' is not a tensor")));
            }
        };
        Tensor::new(&rec.dims, data)
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name).map(|r| &r.data) {
            Some(RecordData::Bytes(b)) => Ok(b),
            Some(_) => Err(Error::Format(format!("record '{name}' is not a byte record"))),
            None => Err(Error::Format(format!("checkpoint has no record '{name}'"))),
        }
    }

    pub fn json<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<T> {
        serde_json::from_slice(self.bytes(name)?).map_err(|e| Error::Format(format!("{name}: {e}")))
    }

    /// Stores every tensor of `weights` under `prefix/`.
    pub fn put_weights(&mut self, prefix: &str, weights: &NetworkWeights, precision: Precision) {
        for (name, t) in weights.all_tensors() {
            self.put_tensor(&format!("{prefix}/{name}"), t, precision);
        }
    }

    /// Reads the tensors under `prefix/`, validating names and shapes against `specs`.
    pub fn weights(&self, prefix: &str, specs: &[ParamSpec]) -> Result<NetworkWeights> {
        let lead = format!("{prefix}/");
        let mut tensors = BTreeMap::new();
        for r in &self.records {
            if let Some(name) = r.name.strip_prefix(&lead) {
                tensors.insert(name.to_string(), self.tensor(&r.name)?);
            }
        }
        NetworkWeights::from_tensors(specs, tensors).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{prefix}: {m}")),
            other => other,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            let tag: u8 = match r.data {
                RecordData::F32(_) => 0,
                RecordData::F64(_) => 1,
                RecordData::Bytes(_) => 2,
            };
            out.push(tag);
            out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
            for &d in &r.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &r.data {
                RecordData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                RecordData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                RecordData::Bytes(b) => out.extend_from_slice(b),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5)? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("record name is not utf-8".into()))?;
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("record '{name}' is too large")))?;
            let data = match tag {
                0 => RecordData::F32(
                    r.take(n.checked_mul(4).ok_or_else(|| Error::Format("overflow".into()))?)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => RecordData::F64(
                    r.take(n.checked_mul(8).ok_or_else(|| Error::Format("overflow".into()))?)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                2 => RecordData::Bytes(r.take(n)?.to_vec()),
                t => return Err(Error::Format(format!("record '{name}' has unknown dtype {t}"))),
            };
            records.push(Record { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        Ok(Checkpoint { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        // Write-then-rename so an interrupted save never leaves a torn checkpoint.
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Format("truncated checkpoint".into())),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
