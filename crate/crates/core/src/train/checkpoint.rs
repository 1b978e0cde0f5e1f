//! Named-tensor archives: `manifest.json` (format, version, kind, free-form
//! metadata, tensor table) next to `tensors.f64`, the concatenated values as
//! little-endian float64.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::signal::cache::{read_f64, write_f64};
use crate::tensor::Tensor;

pub const FORMAT: &str = "eegenv-archive";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "tensors.f64";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub path: PathBuf,
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

impl Archive {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            path: PathBuf::new(),
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), t.cast()));
    }

    /// Adds every parameter, each name prefixed with `prefix`.
    pub fn push_params<T: Scalar>(&mut self, prefix: &str, set: &ParamSet<T>) {
        for (name, t) in set.iter() {
            self.push(format!("{prefix}{name}"), t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut offset = 0;
        let mut entries = Vec::new();
        let mut data = Vec::new();
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
            data.extend_from_slice(t.data());
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        // blob first so a readable manifest always has its data
        write_f64(&dir.join(BLOB), &data)?;
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: corrupt manifest: {e}", path.display())))?;
        if manifest.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "{}: not an archive (format {:?})",
                path.display(),
                manifest.format
            )));
        }
        if manifest.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: archive version {} (supported: {VERSION})",
                path.display(),
                manifest.version
            )));
        }
        let total: usize = manifest
            .tensors
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum();
        let data = read_f64(&dir.join(BLOB), total)?;
        let mut tensors = Vec::new();
        let mut expect = 0;
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expect {
                return Err(Error::Checkpoint(format!(
                    "{}: tensor {} at offset {}, expected {expect}",
                    path.display(),
                    e.name,
                    e.offset
                )));
            }
            expect += n;
            tensors.push((
                e.name,
                Tensor::from_vec(e.shape, data[e.offset..e.offset + n].to_vec())?,
            ));
        }
        Ok(Self {
            path: dir.to_path_buf(),
            kind: manifest.kind,
            meta: manifest.meta,
            tensors,
        })
    }

    /// Copies `prefix`-named tensors into `set`, whose names must all be
    /// present with matching shapes. The first name component of `set`
    /// (e.g. `cta`) must also appear in the archive, otherwise the archive
    /// belongs to another network and a slot error is returned.
    pub fn restore<T: Scalar>(&self, prefix: &str, set: &mut ParamSet<T>) -> Result<()> {
        let Some((first, _)) = set.iter().next() else {
            return Ok(());
        };
        let family = first.split('.').next().unwrap_or(first).to_string();
        let wanted = format!("{prefix}{family}.");
        if !self.tensors.iter().any(|(n, _)| n.starts_with(&wanted)) {
            let found = self
                .tensors
                .iter()
                .find(|(n, _)| n.starts_with(prefix))
                .map(|(n, _)| {
                    n[prefix.len()..]
                        .split('.')
                        .next()
                        .unwrap_or("")
                        .to_string()
                })
                .unwrap_or_default();
            return Err(Error::CheckpointSlot {
                path: self.path.clone(),
                expected: family,
                found,
            });
        }
        let mut values = Vec::with_capacity(set.len());
        for (name, t) in set.iter() {
            let key = format!("{prefix}{name}");
            let src = self.get(&key).ok_or_else(|| {
                Error::Checkpoint(format!("{}: missing {key}", self.path.display()))
            })?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: {key} has shape {:?}, model expects {:?}",
                    self.path.display(),
                    src.shape(),
                    t.shape()
                )));
            }
            values.push(src.cast::<T>());
        }
        for ((_, t), v) in set.iter_mut().zip(values) {
            *t = v;
        }
        Ok(())
    }
}
