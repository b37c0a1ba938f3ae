//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, u32 format version, u32 descriptor length, the JSON
//! descriptor, then every tensor listed in the descriptor as little-endian
//! f32, in order. Trainable parameters come first, followed by batch-norm
//! running means and variances per unit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

use super::tensor::Tensor;
use super::unet::{UNet, UNetConfig};

pub const MAGIC: &[u8; 8] = b"SEGNLCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Descriptor {
    pub config: UNetConfig,
    pub epoch: u32,
    pub tensors: Vec<TensorEntry>,
}

fn walk(model: &mut UNet<f32>, mut f: impl FnMut(String, Vec<usize>, &mut [f32])) {
    model.for_each_named_param(|name, p| {
        let shape = p.value.shape().to_vec();
        f(name.to_string(), shape, p.value.data_mut());
    });
    for (i, unit) in model.units_mut().into_iter().enumerate() {
        let c = unit.bn.running_mean.len();
        f(format!("unit{i}.bn.running_mean"), vec![c], &mut unit.bn.running_mean);
        f(format!("unit{i}.bn.running_var"), vec![c], &mut unit.bn.running_var);
    }
}

pub fn encode_checkpoint(model: &UNet<f32>) -> Result<Vec<u8>> {
    let mut m = model.clone();
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    walk(&mut m, |name, shape, data| {
        tensors.push(TensorEntry { name, shape });
        for v in data.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    });
    let descriptor = serde_json::to_vec(&Descriptor { config: model.config.clone(), epoch: model.epoch, tensors })?;
    let mut out = Vec::with_capacity(16 + descriptor.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
    out.extend_from_slice(&descriptor);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<UNet<f32>> {
    let eof = || Error::Format("checkpoint truncated".into());
    if bytes.len() < 16 {
        return Err(eof());
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Unsupported(format!("checkpoint format version {version}")));
    }
    let dlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let dend = 16usize.checked_add(dlen).filter(|&e| e <= bytes.len()).ok_or_else(eof)?;
    let descriptor: Descriptor = serde_json::from_slice(&bytes[16..dend])?;

    // Initialization values are overwritten; the rng only fixes shapes.
    let mut model = UNet::<f32>::new(&descriptor.config, &mut substream(0, "checkpoint", 0))?;
    model.epoch = descriptor.epoch;
    let mut pos = dend;
    let mut k = 0;
    let mut err = None;
    walk(&mut model, |name, shape, data| {
        if err.is_some() {
            return;
        }
        match descriptor.tensors.get(k) {
            Some(e) if e.name == name && e.shape == shape => {}
            other => {
                err = Some(Error::Format(format!("descriptor entry {k} is {other:?}, architecture expects {name} {shape:?}")));
                return;
            }
        }
        k += 1;
        let end = pos + 4 * data.len();
        if end > bytes.len() {
            err = Some(eof());
            return;
        }
        for (v, chunk) in data.iter_mut().zip(bytes[pos..end].chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        pos = end;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if k != descriptor.tensors.len() || pos != bytes.len() {
        return Err(Error::Format("checkpoint has trailing tensors or bytes".into()));
    }
    if model.units_mut().iter().any(|u| u.bn.running_var.iter().any(|&v| v < 0.0)) {
        return Err(Error::Validation("negative batch-norm running variance".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &UNet<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<UNet<f32>> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Parameter tensors flattened in descriptor order, for comparisons.
pub fn flat_parameters(model: &UNet<f32>) -> Vec<Tensor<f32>> {
    let mut m = model.clone();
    let mut out = Vec::new();
    walk(&mut m, |_, shape, data| out.push(Tensor::new(&shape, data.to_vec()).expect("consistent shape")));
    out
}
