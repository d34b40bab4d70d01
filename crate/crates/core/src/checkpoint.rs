//! Binary model checkpoints and optimizer-state files.
//!
//! Both share one archive layout: 4-byte magic, u32 version, a
//! length-prefixed `key=value` header, then named tensors in strictly
//! increasing name order until end of file. Each tensor is a
//! length-prefixed name, u32 rank, u32 extents and little-endian f64 data.

use std::collections::BTreeMap;
use std::path::Path;

use crate::binio::{self, ByteReader};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::{self, Model, ModelConfig};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FCTC";
pub const OPTIMIZER_MAGIC: &[u8; 4] = b"FOPT";
pub const FORMAT_VERSION: u32 = 1;

const META_PREFIX: &str = "meta.";

/// Header text plus named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub header: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn encode(&self, magic: &[u8; 4]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(magic);
        binio::put_u32(&mut out, FORMAT_VERSION);
        binio::to_u32(self.header.len(), "header length")?;
        binio::put_string(&mut out, &self.header);
        for (i, (name, t)) in self.tensors.iter().enumerate() {
            if i > 0 && self.tensors[i - 1].0 >= *name {
                return Err(Error::Data(format!("tensor `{name}` out of name order")));
            }
            binio::to_u32(name.len(), "name length")?;
            binio::put_string(&mut out, name);
            binio::put_u32(&mut out, binio::to_u32(t.shape().len(), "rank")?);
            for &e in t.shape() {
                binio::put_u32(&mut out, binio::to_u32(e, "extent")?);
            }
            binio::put_f64s(&mut out, t.data());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], magic: &[u8; 4]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(magic)?;
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(r.error(format!("unsupported version {version}")));
        }
        let header = r.string("header")?;
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        while !r.is_at_end() {
            let at = r.offset();
            let name = r.string("tensor name")?;
            if tensors.last().is_some_and(|(prev, _)| *prev >= name) {
                return Err(Error::Format {
                    offset: at,
                    detail: format!("tensor `{name}` out of name order"),
                });
            }
            let rank = r.u32("rank")? as usize;
            if rank > 2 {
                return Err(r.error(format!("rank {rank} > 2")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| r.error("tensor too large"))?;
            let data = r.f64s(n, "tensor data")?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { header, tensors })
    }
}

/// A model plus training metadata (`epoch`, `step`, `val_loss`, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta_f64(&self, key: &str) -> Option<f64> {
        self.meta.get(key).and_then(|v| v.parse().ok())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut kv = self.model.config.to_kv();
        for (k, v) in &self.meta {
            kv.set(&format!("{META_PREFIX}{k}"), v);
        }
        let tensors = self
            .model
            .store
            .iter()
            .map(|(n, p)| (n.to_string(), p.value.clone()))
            .collect();
        Archive {
            header: kv.render(),
            tensors,
        }
        .encode(CHECKPOINT_MAGIC)
    }

    /// Parameters must match the layout implied by the stored config.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let archive = Archive::decode(bytes, CHECKPOINT_MAGIC)?;
        let mut kv = KeyValues::parse(&archive.header)?;
        let meta_keys: Vec<String> = kv
            .keys()
            .filter(|k| k.starts_with(META_PREFIX))
            .map(str::to_string)
            .collect();
        let mut meta = BTreeMap::new();
        for k in meta_keys {
            let v = kv.remove(&k).unwrap_or_default();
            meta.insert(k[META_PREFIX.len()..].to_string(), v);
        }
        let config = ModelConfig::from_kv(&kv)?;
        let expected = model::layout(&config)?;
        if expected.len() != archive.tensors.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, config implies {}",
                archive.tensors.len(),
                expected.len()
            )));
        }
        let mut store = ParameterStore::new();
        for (name, t) in archive.tensors {
            store.insert(name, t)?;
        }
        for spec in &expected {
            let v = store.value(&spec.name).map_err(|_| {
                Error::Config(format!("checkpoint lacks parameter `{}`", spec.name))
            })?;
            if v.shape() != spec.shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter `{}` has shape {:?}, config implies {:?}",
                    spec.name,
                    v.shape(),
                    spec.shape
                )));
            }
        }
        Ok(Self {
            model: Model { config, store },
            meta,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes()?)
    }
}
