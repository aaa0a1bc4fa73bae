//! Binary model checkpoints.
//!
//! Layout: the magic `SKCH`, a little-endian `u32` format version, a `u32`
//! header length, a JSON header, then every tensor as little-endian `f32`
//! values in the order the header lists them.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sketchloop_core::lora::AdapterSpec;
use sketchloop_core::{EncoderConfig, EncoderModel, Error, LoraConfig, Result, Tensor, Tokenizer};

pub const MAGIC: &[u8; 4] = b"SKCH";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: EncoderConfig,
    /// Adapter configuration used in training, if the model carries adapters.
    pub lora: Option<LoraConfig>,
    pub adapters: Vec<AdapterSpec>,
    pub tokenizer: Tokenizer,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance such as training settings.
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// A model plus what was recorded next to it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: EncoderModel,
    pub lora: Option<LoraConfig>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: EncoderModel) -> Self {
        Self {
            model,
            lora: None,
            metadata: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let params = self.model.params();
        let header = Header {
            config: self.model.config().clone(),
            lora: self.lora.clone(),
            adapters: self.model.adapters(),
            tokenizer: self.model.tokenizer().clone(),
            tensors: params
                .iter()
                .map(|(name, p)| TensorEntry {
                    name: name.to_string(),
                    shape: p.value.shape().to_vec(),
                    trainable: p.trainable,
                })
                .collect(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = params.iter().map(|(_, p)| p.value.numel() * 4).sum();
        let mut out = Vec::with_capacity(12 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in params.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing SKCH magic".into()));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != FORMAT_VERSION {
            return Err(bad(format!("format version {version} is not supported (expected {FORMAT_VERSION})")));
        }
        let header_len = word(8) as usize;
        let body = &bytes[12..];
        if body.len() < header_len {
            return Err(bad(format!("header truncated: {} of {header_len} bytes", body.len())));
        }
        let header: Header =
            serde_json::from_slice(&body[..header_len]).map_err(|e| bad(format!("unreadable header: {e}")))?;

        let mut model = EncoderModel::new(header.config.clone(), header.tokenizer.clone(), 0)?;
        model.attach_adapter_specs(&header.adapters)?;

        let expected: HashSet<&str> = model.params().iter().map(|(n, _)| n).collect();
        let listed: HashSet<&str> = header.tensors.iter().map(|t| t.name.as_str()).collect();
        if expected != listed || listed.len() != header.tensors.len() {
            let mut missing: Vec<&str> = expected.difference(&listed).copied().collect();
            let mut extra: Vec<&str> = listed.difference(&expected).copied().collect();
            missing.sort_unstable();
            extra.sort_unstable();
            return Err(bad(format!(
                "tensor list does not match the architecture (missing {missing:?}, unexpected {extra:?})"
            )));
        }
        let expected = expected.len();

        let mut payload = &body[header_len..];
        let mut values = Vec::with_capacity(expected);
        for entry in &header.tensors {
            let want = model.params().get(&entry.name).shape().to_vec();
            if want != entry.shape {
                return Err(bad(format!("{} has shape {:?}, expected {want:?}", entry.name, entry.shape)));
            }
            let n: usize = entry.shape.iter().product();
            if payload.len() < n * 4 {
                return Err(bad(format!("payload truncated inside {}", entry.name)));
            }
            let data = payload[..n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            payload = &payload[n * 4..];
            values.push((entry, Tensor::new(entry.shape.clone(), data)?));
        }
        if !payload.is_empty() {
            return Err(bad(format!("{} trailing bytes after the last tensor", payload.len())));
        }
        let params = model.params_mut();
        for (entry, tensor) in values {
            *params.get_mut(&entry.name).expect("name checked") = tensor;
            params.set_trainable(&entry.name, entry.trainable);
        }
        Ok(Self {
            model,
            lora: header.lora,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sketchloop_core::LoraTargets;

    fn small() -> EncoderModel {
        let cfg = EncoderConfig {
            model_dim: 16,
            embed_dim: 8,
            num_heads: 2,
            text_blocks: 1,
            image_blocks: 1,
            fusion_blocks: 1,
            mlp_hidden: 16,
            image_size: 32,
            patch_size: 8,
            fusion_queries: 2,
            conditioning_dim: 4,
        };
        EncoderModel::new(cfg, Tokenizer::build(["a pale man with a hooked nose"], 64), 5).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut m = small();
        let lora = LoraConfig::with_targets(LoraTargets::CrossAttention);
        m.inject_lora(&lora, 2).unwrap();
        let ck = Checkpoint {
            model: m,
            lora: Some(lora),
            metadata: serde_json::json!({"seed": 2}),
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.model.params(), ck.model.params());
        assert_eq!(back.model.adapters(), ck.model.adapters());
        assert_eq!(back.lora, ck.lora);
        assert_eq!(back.metadata["seed"], 2);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = Checkpoint::new(small()).to_bytes();
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        let err = Checkpoint::from_bytes(&wrong_version).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong_magic).is_err());

        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer).unwrap_err().to_string().contains("trailing"));
    }
}
