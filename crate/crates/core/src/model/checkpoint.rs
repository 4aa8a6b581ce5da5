//! Binary checkpoints: `GCDCKPT1`, a little-endian u64 header length, a JSON
//! header, then every parameter as little-endian f64 in name order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdapterConfig, BackboneConfig, HeadConfig, Model, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"GCDCKPT1";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    backbone: BackboneConfig,
    adapter: AdapterConfig,
    head: HeadConfig,
    meta: CheckpointMeta,
    params: Vec<Entry>,
}

pub fn save_checkpoint(path: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    let header = Header {
        backbone: model.backbone.clone(),
        adapter: model.adapter.clone(),
        head: model.head.clone(),
        meta: meta.clone(),
        params: model
            .params
            .iter()
            .map(|(name, p)| Entry {
                name: name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, p) in model.params.iter() {
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("checkpoint truncated before magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|_| Error::Format("checkpoint header truncated".into()))?;
    let header: Header = serde_json::from_slice(&json)?;
    header.backbone.validate()?;
    let mut params = ParamStore::new();
    let mut buf = [0u8; 8];
    for e in header.params {
        let n: usize = e.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format(format!("payload of {} truncated", e.name)))?;
            data.push(f64::from_le_bytes(buf));
        }
        params.insert(e.name, Tensor::new(e.shape, data)?, e.trainable);
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::Format(
            "trailing bytes after checkpoint payload".into(),
        ));
    }
    let model = Model {
        backbone: header.backbone,
        adapter: header.adapter,
        head: header.head,
        params,
    };
    Ok((model, header.meta))
}
