//! Self-describing binary checkpoint container.
//!
//! Layout: a version header line, a little-endian `u64` byte length, a JSON
//! block with free-form metadata plus the tensor table, then every tensor's
//! values as little-endian `f64` in table order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::{Mat, Optimizer, OptimizerKind, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub value: Mat,
    pub trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    meta: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: String,
    pub meta: Value,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn new(header: &str, meta: Value) -> Self {
        Self {
            header: header.to_string(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Mat, trainable: bool) {
        self.tensors.push(Tensor {
            name: name.into(),
            value,
            trainable,
        });
    }

    /// Adds every parameter of `store`, names prefixed with `prefix`.
    pub fn push_params(&mut self, prefix: &str, store: &ParamStore) {
        for (id, name, value) in store.iter() {
            self.push(format!("{prefix}{name}"), value.clone(), store.is_trainable(id));
        }
    }

    /// Rebuilds a store from the tensors whose names start with `prefix`.
    pub fn params(&self, prefix: &str) -> ParamStore {
        let mut store = ParamStore::new();
        for t in &self.tensors {
            if let Some(name) = t.name.strip_prefix(prefix) {
                store.insert(name, t.value.clone(), t.trainable);
            }
        }
        store
    }

    pub fn push_optimizer(&mut self, opt: &Optimizer) {
        self.meta["optimizer"] = serde_json::json!({
            "kind": opt.kind,
            "lr": opt.lr,
            "step": opt.step,
        });
        for (name, m) in &opt.first {
            self.push(format!("opt.m/{name}"), m.clone(), false);
        }
        for (name, v) in &opt.second {
            self.push(format!("opt.v/{name}"), v.clone(), false);
        }
    }

    pub fn optimizer(&self) -> Result<Optimizer> {
        let o = &self.meta["optimizer"];
        let kind: OptimizerKind = serde_json::from_value(o["kind"].clone())?;
        let lr = o["lr"].as_f64().ok_or_else(|| Error::Format("optimizer lr".into()))?;
        let mut opt = Optimizer::new(kind, lr);
        opt.step = o["step"].as_u64().ok_or_else(|| Error::Format("optimizer step".into()))?;
        for t in &self.tensors {
            if let Some(name) = t.name.strip_prefix("opt.m/") {
                opt.first.insert(name.to_string(), t.value.clone());
            } else if let Some(name) = t.name.strip_prefix("opt.v/") {
                opt.second.insert(name.to_string(), t.value.clone());
            }
        }
        Ok(opt)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let index = Index {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    rows: t.value.nrows(),
                    cols: t.value.ncols(),
                    trainable: t.trainable,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&index)?;
        let mut out = Vec::with_capacity(json.len() + 64);
        out.extend_from_slice(self.header.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in t.value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], expected_header: &str) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format("header is not utf-8".into()))?;
        if header != expected_header {
            return Err(Error::Format(format!(
                "expected header `{expected_header}`, found `{header}`"
            )));
        }
        let mut pos = nl + 1;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len());
            let end = end.ok_or_else(|| Error::Format("truncated".into()))?;
            let s = &bytes[*pos..end];
            *pos = end;
            Ok(s)
        };
        let len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes")) as usize;
        let index: Index = serde_json::from_slice(take(&mut pos, len)?)?;
        let mut tensors = Vec::with_capacity(index.tensors.len());
        for e in index.tensors {
            let raw = take(&mut pos, e.rows * e.cols * 8)?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let value = Mat::from_shape_vec((e.rows, e.cols), values)
                .map_err(|err| Error::Format(err.to_string()))?;
            tensors.push(Tensor {
                name: e.name,
                value,
                trainable: e.trainable,
            });
        }
        if pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self {
            header: header.to_string(),
            meta: index.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, expected_header: &str) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected_header)
    }
}
