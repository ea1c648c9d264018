//! Named parameter sets, their binding onto a [`Graph`], and a binary
//! checkpoint container.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// An ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor. Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    /// Panics when `name` is missing; for lookups of names the caller created.
    pub fn tensor(&self, name: &str) -> &Tensor {
        self.get(name).unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Tensors of the same shapes, filled with zeros.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Places every tensor on `g`, as differentiable leaves when `trainable`
    /// and as constants otherwise.
    pub fn bind<'a>(&'a self, g: &mut Graph, trainable: bool) -> Bound<'a> {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { set: self, vars }
    }
}

/// A [`ParamSet`] placed on a graph.
pub struct Bound<'a> {
    set: &'a ParamSet,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .set
            .index_of(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in set order; parameters the root does not depend on get zeros.
    pub fn grads(&self, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(&self.set.tensors)
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// He-style fan-in initialization: `N(0, 2 / fan_in)`.
pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Uniform `±1/sqrt(fan_in)`, the usual default for fully connected layers.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

const MAGIC: &[u8; 8] = b"AATCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Error, Debug)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint file")]
    BadMagic { path: PathBuf },
    #[error("{path}: checkpoint version {found} is not supported (expected {CHECKPOINT_VERSION})")]
    Version { path: PathBuf, found: u32 },
    #[error("{path}: corrupt checkpoint ({detail})")]
    Corrupt { path: PathBuf, detail: String },
    #[error("checkpoint has no {0}")]
    Missing(String),
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

/// Groups of named tensors plus free-form JSON metadata.
///
/// On disk: an 8-byte magic, a little-endian `u32` version, a `u64` header
/// length, a JSON header listing every tensor's group, name and shape, then
/// all tensor data as little-endian `f64` in header order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub groups: BTreeMap<String, ParamSet>,
}

impl Checkpoint {
    pub fn group(&self, name: &str) -> Result<&ParamSet, CheckpointError> {
        self.groups.get(name).ok_or_else(|| CheckpointError::Missing(format!("group {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut data = Vec::new();
        for (group, set) in &self.groups {
            for (name, t) in set.iter() {
                entries.push(TensorEntry {
                    group: group.clone(),
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                });
                data.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
            }
        }
        let header = serde_json::to_vec(&Header {
            version: CHECKPOINT_VERSION,
            meta: self.meta.clone(),
            tensors: entries,
        })
        .expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, CheckpointError> {
        let corrupt = |detail: &str| CheckpointError::Corrupt {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic {
                path: path.to_path_buf(),
            });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                path: path.to_path_buf(),
                found: version,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|e| *e <= bytes.len())
            .ok_or_else(|| corrupt("header runs past end of file"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..header_end]).map_err(|e| corrupt(&e.to_string()))?;
        let mut groups: BTreeMap<String, ParamSet> = BTreeMap::new();
        let mut pos = header_end;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let end = pos + n * 8;
            if end > bytes.len() {
                return Err(corrupt("tensor data truncated"));
            }
            let data = bytes[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos = end;
            let set = groups.entry(e.group).or_default();
            if set.index_of(&e.name).is_some() {
                return Err(corrupt("duplicate tensor name"));
            }
            set.insert(e.name, Tensor::from_vec(&e.shape, data));
        }
        if pos != bytes.len() {
            return Err(corrupt("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            meta: header.meta,
            groups,
        })
    }

    /// Writes to a sibling temporary file, syncs it, then renames it over `path`.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }
}
