//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `b"LATSEGCK"`, `u64` header length, JSON header, then every parameter's
//! values as raw `f64`s in header order, followed by the optimizer's first
//! and second moments in the same order. Raw floats make the round trip
//! bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::train::AdamW;

const MAGIC: &[u8; 8] = b"LATSEGCK";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    config_hash: String,
    epoch: usize,
    adam_step: u64,
    params: Vec<(String, Vec<usize>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub config_hash: String,
    pub epoch: usize,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: AdamW,
}

impl Checkpoint {
    pub fn capture(cfg: &RunConfig, model: &Model, opt: &AdamW, epoch: usize) -> Self {
        Self {
            config: cfg.clone(),
            config_hash: cfg.hash(),
            epoch,
            params: model
                .params()
                .iter()
                .map(|(_, name, t)| (name.to_string(), t.clone()))
                .collect(),
            optimizer: opt.clone(),
        }
    }

    /// Rebuilds the model described by the stored config and loads the
    /// stored parameter values into it.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(&self.config.model(), self.config.ablation, self.config.seed)?;
        let ps = model.params_mut();
        if ps.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "config builds {} parameters, checkpoint has {}",
                ps.len(),
                self.params.len()
            )));
        }
        for (name, t) in &self.params {
            let id = ps
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if ps.value(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
            }
            *ps.value_mut(id) = t.clone();
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            epoch: self.epoch,
            adam_step: self.optimizer.step,
            params: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), t.shape().to_vec()))
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let tensors = self
            .params
            .iter()
            .map(|(_, t)| t)
            .chain(&self.optimizer.m)
            .chain(&self.optimizer.v);
        for t in tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| bad("truncated header length"))?;
        let len = u64::from_le_bytes(len) as usize;
        if r.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&r[..len]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        r = &r[len..];
        let mut read_tensor = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            if r.len() < 8 * n {
                return Err(bad("truncated tensor data"));
            }
            let data = r[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            r = &r[8 * n..];
            Tensor::new(shape.to_vec(), data)
        };
        let mut params = Vec::with_capacity(header.params.len());
        for (name, shape) in &header.params {
            params.push((name.clone(), read_tensor(shape)?));
        }
        let m = header.params.iter().map(|(_, s)| read_tensor(s)).collect::<Result<_>>()?;
        let v = header.params.iter().map(|(_, s)| read_tensor(s)).collect::<Result<_>>()?;
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        if header.config.hash() != header.config_hash {
            return Err(bad("config hash does not match stored config"));
        }
        Ok(Self {
            optimizer: AdamW {
                cfg: header.config.optimizer.clone(),
                step: header.adam_step,
                m,
                v,
            },
            config: header.config,
            config_hash: header.config_hash,
            epoch: header.epoch,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
