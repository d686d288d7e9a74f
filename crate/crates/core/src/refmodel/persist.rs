//! `LMDL` model files: magic, version byte, a length-prefixed JSON config
//! block, then little-endian f64 weights and biases in layer order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dense, ModelConfig, ModelError, Network, TrainConfig, TrainedModel};

pub const MODEL_MAGIC: &[u8; 4] = b"LMDL";
pub const MODEL_VERSION: u8 = 0x01;

#[derive(Serialize, Deserialize)]
struct ConfigBlock {
    model: ModelConfig,
    train: TrainConfig,
}

pub fn encode_model(model: &TrainedModel) -> Vec<u8> {
    let block = serde_json::to_vec(&ConfigBlock {
        model: model.config.clone(),
        train: model.train_config.clone(),
    })
    .expect("configs always serialize");
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.push(MODEL_VERSION);
    out.extend_from_slice(&(block.len() as u32).to_le_bytes());
    out.extend_from_slice(&block);
    for layer in &model.network.layers {
        for v in layer.weights.iter().chain(&layer.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<TrainedModel, ModelError> {
    let fail = |m: &str| ModelError::Format(m.to_string());
    if bytes.len() < 9 || &bytes[..4] != MODEL_MAGIC {
        return Err(fail("missing LMDL magic"));
    }
    if bytes[4] != MODEL_VERSION {
        return Err(ModelError::Format(format!("unsupported version {}", bytes[4])));
    }
    let block_len = u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]) as usize;
    let block_end = 9 + block_len;
    if bytes.len() < block_end {
        return Err(fail("truncated config block"));
    }
    let block: ConfigBlock = serde_json::from_slice(&bytes[9..block_end])
        .map_err(|e| ModelError::Format(format!("config block: {e}")))?;
    block.model.validate()?;
    let mut pos = block_end;
    let mut layers = Vec::new();
    for (i, w) in block.model.layer_sizes.windows(2).enumerate() {
        let mut layer = Dense::zeros(w[0], w[1], block.model.has_bias(i));
        for slot in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
            let chunk = bytes.get(pos..pos + 8).ok_or_else(|| fail("truncated weight data"))?;
            *slot = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            pos += 8;
        }
        layers.push(layer);
    }
    if pos != bytes.len() {
        return Err(ModelError::Format(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(TrainedModel {
        network: Network { layers, activation: block.model.activation },
        config: block.model,
        train_config: block.train,
        loss_history: Vec::new(),
    })
}

pub fn save_model<W: Write>(model: &TrainedModel, mut sink: W) -> Result<(), ModelError> {
    sink.write_all(&encode_model(model))?;
    Ok(())
}

pub fn load_model<R: Read>(mut source: R) -> Result<TrainedModel, ModelError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode_model(&bytes)
}

impl TrainedModel {
    pub fn save_to(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, encode_model(self))?;
        Ok(())
    }

    pub fn load_from(path: &Path) -> Result<Self, ModelError> {
        decode_model(&std::fs::read(path)?)
    }
}
