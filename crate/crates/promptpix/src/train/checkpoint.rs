//! Versioned binary checkpoints.
//!
//! Layout: an 8-byte magic, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header (configs, step counter,
//! parameter names and shapes), then raw little-endian `f32` data: every
//! parameter in header order, then the first moments, then the second
//! moments. Field order and parameter order are fixed, so a
//! save -> load -> save round trip is byte-stable. Writes go through a
//! temp file and a rename, so readers never observe a partial checkpoint.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::trainer::TrainConfig;
use crate::model::{BackboneConfig, Model};
use crate::seed::fnv1a64;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PPIXCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    backbone: BackboneConfig,
    train: TrainConfig,
    step: u64,
    opt_t: u64,
    params: Vec<TensorMeta>,
}

/// A full training snapshot: both configs, the step counter, every
/// parameter, and the optimizer moments (paired with `params` by position).
/// The sampling RNG needs no stored state: streams are derived from
/// `(train.seed, step)`.
pub struct Checkpoint {
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub opt_t: u64,
    pub params: Vec<(String, ArrayD<f32>)>,
    pub opt_m: Vec<ArrayD<f32>>,
    pub opt_v: Vec<ArrayD<f32>>,
}

impl Checkpoint {
    /// Rebuilds the model this checkpoint was saved from: the architecture
    /// comes from the stored config, the weights from the stored tensors.
    pub fn restore_model(&self) -> Result<Model<f32>> {
        let mut model: Model<f32> = Model::build(&self.backbone, 0)?;
        if self.params.len() != model.store.len() {
            return Err(Error::checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        let named: HashMap<String, ArrayD<f32>> = self.params.iter().cloned().collect();
        model.store.load_named(&named)?;
        Ok(model)
    }
}

fn push_arr(out: &mut Vec<u8>, arr: &ArrayD<f32>) {
    out.reserve(arr.len() * 4);
    for &x in arr.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_arr(data: &[u8], pos: &mut usize, shape: &[usize]) -> Result<ArrayD<f32>> {
    let n: usize = shape.iter().product();
    let bytes = n * 4;
    let slice = data
        .get(*pos..*pos + bytes)
        .ok_or_else(|| Error::checkpoint("checkpoint data section truncated"))?;
    *pos += bytes;
    let vals: Vec<f32> = slice
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ArrayD::from_shape_vec(shape.to_vec(), vals)
        .map_err(|e| Error::checkpoint(format!("bad tensor shape {shape:?}: {e}")))
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            backbone: self.backbone.clone(),
            train: self.train.clone(),
            step: self.step,
            opt_t: self.opt_t,
            params: self
                .params
                .iter()
                .map(|(name, v)| TensorMeta { name: name.clone(), shape: v.shape().to_vec() })
                .collect(),
        };
        let hjson = serde_json::to_vec(&header).map_err(|e| Error::checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        for (_, p) in &self.params {
            push_arr(&mut out, p);
        }
        for m in &self.opt_m {
            push_arr(&mut out, m);
        }
        for v in &self.opt_v {
            push_arr(&mut out, v);
        }
        let ctx = || format!("writing checkpoint {}", path.display());
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, &out).map_err(Error::io(ctx()))?;
        fs::rename(&tmp, path).map_err(Error::io(ctx()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let data =
            fs::read(path).map_err(Error::io(format!("reading checkpoint {}", path.display())))?;
        if data.len() < 20 || &data[..8] != MAGIC {
            return Err(Error::checkpoint(format!(
                "{} is not a checkpoint file (bad magic)",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(data[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::checkpoint(format!(
                "checkpoint format version {version} unsupported (expected {VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(data[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= data.len())
            .ok_or_else(|| Error::checkpoint("checkpoint header truncated"))?;
        let header: Header = serde_json::from_slice(&data[20..hend])
            .map_err(|e| Error::checkpoint(format!("bad checkpoint header: {e}")))?;

        let scalars: usize = header.params.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if data.len() - hend != scalars * 4 * 3 {
            return Err(Error::checkpoint(format!(
                "checkpoint data length {} does not match header ({} scalars x 3 sections)",
                data.len() - hend,
                scalars
            )));
        }
        let mut pos = hend;
        let mut params = Vec::with_capacity(header.params.len());
        for meta in &header.params {
            params.push((meta.name.clone(), read_arr(&data, &mut pos, &meta.shape)?));
        }
        let mut opt_m = Vec::with_capacity(header.params.len());
        for meta in &header.params {
            opt_m.push(read_arr(&data, &mut pos, &meta.shape)?);
        }
        let mut opt_v = Vec::with_capacity(header.params.len());
        for meta in &header.params {
            opt_v.push(read_arr(&data, &mut pos, &meta.shape)?);
        }
        Ok(Checkpoint {
            backbone: header.backbone,
            train: header.train,
            step: header.step,
            opt_t: header.opt_t,
            params,
            opt_m,
            opt_v,
        })
    }
}

/// Short content id of a checkpoint file, for report metadata.
pub fn digest_file(path: &Path) -> Result<String> {
    let data =
        fs::read(path).map_err(Error::io(format!("reading checkpoint {}", path.display())))?;
    Ok(format!("{:016x}", fnv1a64(&data)))
}
