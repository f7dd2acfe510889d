//! Checkpoint container: magic "CADPT1", u32 version, JSON header (config
//! echo, RNG state, tensor directory), f32 LE payloads, SHA-256 trailer.
//! The frozen backbone is never stored; it is regenerated from
//! (config, seed) at load and verified against the recorded checksum.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{CloudAdapterNet, ModelConfig};
use crate::optim::AdamW;
use crate::params::hex;
use crate::rng::{RngState, SeedRng};
use crate::train::TrainConfig;

const MAGIC: &[u8; 6] = b"CADPT1";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    seed: u64,
    iter: u64,
    rng: RngState,
    best_val_miou: Option<f64>,
    backbone_sha256: String,
    tensors: Vec<TensorEntry>,
}

pub struct LoadedCheckpoint {
    pub model: CloudAdapterNet<f32>,
    pub optimizer: AdamW<f32>,
    pub train: TrainConfig,
    pub iter: u64,
    pub rng: SeedRng,
    pub best_val_miou: Option<f64>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &CloudAdapterNet<f32>,
    optimizer: &AdamW<f32>,
    train: &TrainConfig,
    iter: u64,
    rng_state: &RngState,
    best_val_miou: Option<f64>,
) -> Result<()> {
    let named = model.named_trainable();
    let (m, v) = optimizer.moments();
    if m.len() != named.len() {
        return Err(Error::Checkpoint(format!(
            "optimizer tracks {} tensors, model has {}",
            m.len(),
            named.len()
        )));
    }
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, data: &[f32], payload: &mut Vec<u8>| {
        for &x in data {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        tensors.push(TensorEntry { name, shape });
    };
    for (i, (name, t)) in named.iter().enumerate() {
        let shape = t.shape().to_vec();
        push(name.clone(), shape.clone(), &t.data(), &mut payload);
        push(format!("opt.m.{name}"), shape.clone(), &m[i], &mut payload);
        push(format!("opt.v.{name}"), shape, &v[i], &mut payload);
    }
    let header = Header {
        model: model.config().clone(),
        train: train.clone(),
        seed: model.seed(),
        iter,
        rng: rng_state.clone(),
        best_val_miou,
        backbone_sha256: hex(&model.backbone_checksum()),
        tensors,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization: {e}")))?;

    let mut bytes = Vec::with_capacity(18 + header_json.len() + payload.len() + 32);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);

    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |msg: String| Error::Checkpoint(format!("{}: {}", path.display(), msg));
    if bytes.len() < MAGIC.len() + 4 + 8 + 32 {
        return Err(fail("truncated file".to_string()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(fail("checksum mismatch (corrupt or tampered)".to_string()));
    }
    if &body[..6] != MAGIC {
        return Err(fail("bad magic".to_string()));
    }
    let version = u32::from_le_bytes(body[6..10].try_into().unwrap());
    if version != VERSION {
        return Err(fail(format!("unknown version {version}")));
    }
    let header_len = u64::from_le_bytes(body[10..18].try_into().unwrap()) as usize;
    if body.len() < 18 + header_len {
        return Err(fail("truncated header".to_string()));
    }
    let header: Header = serde_json::from_slice(&body[18..18 + header_len])
        .map_err(|e| fail(format!("header parse: {e}")))?;

    let model = CloudAdapterNet::<f32>::new(&header.model, header.seed)?;
    let actual = hex(&model.backbone_checksum());
    if actual != header.backbone_sha256 {
        return Err(fail(format!(
            "frozen backbone checksum mismatch: regenerated {} vs stored {}",
            actual, header.backbone_sha256
        )));
    }

    // walk the payload by the directory
    let mut offset = 18 + header_len;
    let mut read_tensor = |entry: &TensorEntry| -> Result<Vec<f32>> {
        let n: usize = entry.shape.iter().product();
        let end = offset + 4 * n;
        if end > body.len() {
            return Err(fail(format!("payload truncated at tensor {}", entry.name)));
        }
        let data: Vec<f32> = body[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset = end;
        Ok(data)
    };

    let named = model.named_trainable();
    let mut params = Vec::with_capacity(named.len());
    let mut m = Vec::with_capacity(named.len());
    let mut v = Vec::with_capacity(named.len());
    let mut entries = header.tensors.iter();
    for (name, tensor) in &named {
        for expected_prefix in ["", "opt.m.", "opt.v."] {
            let entry = entries
                .next()
                .ok_or_else(|| fail(format!("directory too short at {name}")))?;
            let expected = format!("{expected_prefix}{name}");
            if entry.name != expected {
                return Err(fail(format!(
                    "directory order mismatch: found {}, expected {}",
                    entry.name, expected
                )));
            }
            if entry.shape != tensor.shape() {
                return Err(fail(format!(
                    "tensor {} has shape {:?} in file, model wants {:?}",
                    entry.name,
                    entry.shape,
                    tensor.shape()
                )));
            }
            let data = read_tensor(entry)?;
            match expected_prefix {
                "" => {
                    tensor.with_data_mut(|d| d.copy_from_slice(&data));
                    params.push(tensor.clone());
                }
                "opt.m." => m.push(data),
                _ => v.push(data),
            }
        }
    }
    if offset != body.len() {
        return Err(fail("trailing bytes after payload".to_string()));
    }

    let optimizer = AdamW::with_state(params, m, v, header.iter, header.train.adam)?;
    let rng = header.rng.restore()?;
    Ok(LoadedCheckpoint {
        model,
        optimizer,
        train: header.train,
        iter: header.iter,
        rng,
        best_val_miou: header.best_val_miou,
    })
}
