//! Binary checkpoints of model parameters, centroid banks and the input
//! standardiser.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic     8 bytes  "DCDACKPT"
//! version   u32      currently 1
//! meta_len  u32      followed by meta_len bytes of JSON metadata
//! count     u32      number of tensors
//! tensor*   name_len u32, name (UTF-8), rank u32, dims u64 × rank,
//!           values f64 × product(dims)
//! ```
//!
//! The metadata holds the architecture and the bank coefficient α. Tensor
//! names are the model's parameter names, then `bank.{source|target}.{space}
//! .centroids` / `.initialized` (1.0 or 0.0 per class), then
//! `standardizer.mean` and `standardizer.std`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::centroids::CentroidBank;
use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::model::{AdaptationModel, Architecture};
use crate::tensor::Tensor;
use crate::trainer::Banks;

pub const MAGIC: &[u8; 8] = b"DCDACKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    architecture: Architecture,
    alpha: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: AdaptationModel,
    pub banks: Banks,
    pub standardizer: Standardizer,
}

fn bank_tensors(prefix: &str, banks: &[CentroidBank], out: &mut Vec<(String, Tensor)>) {
    for (i, b) in banks.iter().enumerate() {
        out.push((format!("bank.{prefix}.{i}.centroids"), b.centroids().clone()));
        let mask = b.initialized().iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
        out.push((format!("bank.{prefix}.{i}.initialized"), Tensor::row_vector(mask)));
    }
}

impl Checkpoint {
    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .model
            .parameter_names()
            .into_iter()
            .zip(self.model.parameters().into_iter().cloned())
            .collect();
        bank_tensors("source", &self.banks.source, &mut out);
        bank_tensors("target", &self.banks.target, &mut out);
        out.push(("standardizer.mean".into(), Tensor::row_vector(self.standardizer.mean.clone())));
        out.push(("standardizer.std".into(), Tensor::row_vector(self.standardizer.std.clone())));
        out
    }

    fn alpha(&self) -> f64 {
        self.banks.source.first().map_or(0.7, CentroidBank::alpha)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&Meta {
            architecture: self.model.architecture().clone(),
            alpha: self.alpha(),
        })?;
        let tensors = self.named_tensors();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Config("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)?;
        meta.architecture.validate()?;
        let count = r.u32()? as usize;
        let mut tensors = std::collections::BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Config("checkpoint tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<f64>>>()?;
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Config("trailing bytes after checkpoint tensors".into()));
        }
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor {name}")))
        };

        let mut model = AdaptationModel::zeros(meta.architecture.clone())?;
        let params = model.parameter_names().iter().map(|n| take(n)).collect::<Result<Vec<_>>>()?;
        model.load_parameters(params)?;

        let spaces = meta.architecture.num_spaces();
        let mut read_banks = |prefix: &str| -> Result<Vec<CentroidBank>> {
            (0..spaces)
                .map(|i| {
                    let c = take(&format!("bank.{prefix}.{i}.centroids"))?;
                    let mask = take(&format!("bank.{prefix}.{i}.initialized"))?;
                    CentroidBank::from_parts(c, mask.data().iter().map(|&v| v != 0.0).collect(), meta.alpha)
                })
                .collect()
        };
        let banks = Banks {
            source: read_banks("source")?,
            target: read_banks("target")?,
        };
        let standardizer = Standardizer {
            mean: take("standardizer.mean")?.into_data(),
            std: take("standardizer.std")?.into_data(),
        };
        Ok(Checkpoint {
            model,
            banks,
            standardizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Config(format!("cannot open checkpoint {}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Config("checkpoint is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
