//! Checkpoint layout: the magic `DPRB1`, a little-endian `u32` header length,
//! a JSON header (layers, taps, seed, shapes), then every parameter as
//! little-endian `f32` in layer order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerSpec, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"DPRB1";

#[derive(Serialize, Deserialize)]
struct Header {
    layers: Vec<LayerSpec>,
    taps: BTreeMap<String, usize>,
    seed: u64,
    num_classes: usize,
    input_shape: [usize; 3],
    shapes: Vec<Vec<Vec<usize>>>,
}

pub fn checkpoint_bytes(model: &Model<f32>) -> Result<Vec<u8>> {
    let header = Header {
        layers: model.layers.clone(),
        taps: model.taps.clone(),
        seed: model.seed,
        num_classes: model.num_classes,
        input_shape: model.input_shape,
        shapes: model
            .params
            .iter()
            .map(|ps| ps.iter().map(|p| p.shape().to_vec()).collect())
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(9 + json.len() + model.num_params() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params.iter().flatten() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn model_from_bytes(bytes: &[u8], path: &Path) -> Result<Model<f32>> {
    let bad = |reason: &str| Error::format(path, reason.to_string());
    if bytes.len() < 9 || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(bad("missing DPRB1 magic"));
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let body = bytes
        .get(9..9 + header_len)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| Error::format(path, format!("header: {e}")))?;
    if header.shapes.len() != header.layers.len() {
        return Err(bad("parameter shape list does not match layer list"));
    }
    let mut blobs = bytes[9 + header_len..].chunks_exact(4);
    let mut params = Vec::with_capacity(header.layers.len());
    for (layer, shapes) in header.layers.iter().zip(&header.shapes) {
        if layer.param_shapes() != *shapes {
            return Err(bad("parameter shapes disagree with layer descriptors"));
        }
        let mut ps = Vec::with_capacity(shapes.len());
        for shape in shapes {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let b = blobs.next().ok_or_else(|| bad("truncated parameter data"))?;
                data.push(f32::from_le_bytes(b.try_into().unwrap()));
            }
            ps.push(Tensor::new(shape.clone(), data)?);
        }
        params.push(ps);
    }
    if blobs.next().is_some() || !blobs.remainder().is_empty() {
        return Err(bad("trailing bytes after parameters"));
    }
    Ok(Model::from_parts(
        header.layers,
        params,
        header.taps,
        header.input_shape,
        header.num_classes,
        header.seed,
    ))
}

pub fn save_checkpoint(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(model)?).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; the model comes back in eval mode.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes, path)
}
