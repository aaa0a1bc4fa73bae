//! Assembles encoders and the refinement engine from checkpoints or defaults.

use std::path::Path;
use std::sync::Arc;

use sketchloop_core::dataset::{fixture_description, LEVELS};
use sketchloop_core::pipeline::{build_tokenizer, PretrainConfig};
use sketchloop_core::{EncoderConfig, EncoderModel, RefinementEngine, Result, ToyLatentBackend};

use crate::checkpoint::Checkpoint;

/// Seed of the toy generator's matrices unless overridden.
pub const DEFAULT_BACKEND_SEED: u64 = 0x5EED;

/// Untrained encoder whose vocabulary covers the built-in captions and
/// fixture descriptions. Used for scoring when no checkpoint is given.
pub fn default_encoder(seed: u64) -> Result<EncoderModel> {
    let fixture: Vec<String> = (0..8).flat_map(|c| (0..LEVELS.len()).map(move |l| fixture_description(c, l))).collect();
    let tok = build_tokenizer(&PretrainConfig::default(), fixture.iter().map(String::as_str));
    EncoderModel::new(EncoderConfig::default(), tok, seed)
}

/// The refinement engine plus whether its encoders came from a checkpoint.
#[derive(Debug, Clone)]
pub struct LoadedEngine {
    pub engine: RefinementEngine,
    pub trained: bool,
}

impl LoadedEngine {
    pub fn from_model(model: EncoderModel, trained: bool, backend_seed: u64) -> Result<Self> {
        let cfg = model.config();
        let backend = ToyLatentBackend::new(cfg.image_size, cfg.image_size, cfg.conditioning_dim, backend_seed)?;
        Ok(Self {
            engine: RefinementEngine::new(Arc::new(backend), model)?,
            trained,
        })
    }

    pub fn load(checkpoint: Option<&Path>, backend_seed: u64) -> Result<Self> {
        match checkpoint {
            Some(path) => Self::from_model(Checkpoint::load(path)?.model, true, backend_seed),
            None => Self::from_model(default_encoder(0)?, false, backend_seed),
        }
    }
}
