//! Dataset files: `GCDSYN01`, a little-endian u64 header length, a JSON
//! header, then every sample as little-endian f64 in id order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, GcdSplit, SyntheticSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"GCDSYN01";

#[derive(Serialize, Deserialize)]
struct Header {
    spec: SyntheticSpec,
    seed: u64,
    /// Ground-truth class of every sample.
    labels: Vec<usize>,
    split: Option<GcdSplit>,
}

pub fn save_dataset(path: &Path, data: &Dataset, split: Option<&GcdSplit>) -> Result<()> {
    let header = Header {
        spec: data.spec.clone(),
        seed: data.spec.seed,
        labels: data.labels.clone(),
        split: split.cloned(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(16 + json.len() + 8 * data.samples.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in data.samples.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(Dataset, Option<GcdSplit>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a dataset file".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| Error::Format("dataset header truncated".into()))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| Error::Format(format!("dataset header: {e}")))?;
    header.spec.validate()?;
    let payload = &bytes[16 + len..];
    let width = header.spec.sample_width();
    let n = header.labels.len();
    if payload.len() != n * width * 8 {
        return Err(Error::Format(format!(
            "payload holds {} bytes, header implies {}",
            payload.len(),
            n * width * 8
        )));
    }
    if header.labels.iter().any(|&y| y >= header.spec.num_classes) {
        return Err(Error::Format("label outside the class range".into()));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let dataset = Dataset {
        spec: header.spec,
        samples: Tensor::new(vec![n, width], data)?,
        labels: header.labels,
    };
    Ok((dataset, header.split))
}
