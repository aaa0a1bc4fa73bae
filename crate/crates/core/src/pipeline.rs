//! Base-encoder preparation shared by the CLI, the service and the tests.
//!
//! Adapters are meant to specialise an encoder that already aligns images
//! with captions. With no pretrained weights at hand, the base is trained
//! from scratch on generic captioned drawings ([`synth_captioned`]) with every
//! parameter trainable, then frozen.

use serde::{Deserialize, Serialize};

use crate::dataset::{self, synth_captioned, SketchPair};
use crate::encoder::{EncoderConfig, EncoderModel};
use crate::error::Result;
use crate::tokenizer::{Tokenizer, VOCAB_CAP};
use crate::trainer::{self, TrainConfig, TrainLog, TrainMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Captioned drawings generated for pretraining.
    pub pairs: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            pairs: 128,
            epochs: 10,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn corpus(&self) -> Vec<SketchPair> {
        synth_captioned(self.pairs, self.seed)
    }
}

/// Vocabulary over the pretraining captions plus `texts`.
pub fn build_tokenizer<'a>(pretrain: &PretrainConfig, texts: impl IntoIterator<Item = &'a str>) -> Tokenizer {
    let corpus = pretrain.corpus();
    let texts: Vec<&str> = texts.into_iter().collect();
    Tokenizer::build(corpus.iter().map(|p| p.description.as_str()).chain(texts), VOCAB_CAP)
}

/// A freshly initialised encoder trained on the captioned corpus, with every
/// parameter frozen. The epoch scoring best on a held-out fifth is kept.
pub fn pretrain_base(config: EncoderConfig, tokenizer: Tokenizer, pretrain: &PretrainConfig) -> Result<(EncoderModel, TrainLog)> {
    let model = EncoderModel::new(config, tokenizer, pretrain.seed)?;
    let corpus = pretrain.corpus();
    let (train_set, val_set) = dataset::split(&corpus, dataset::DEFAULT_SPLIT_RATIO, pretrain.seed)?;
    let cfg = TrainConfig {
        epochs: pretrain.epochs,
        batch_size: pretrain.batch_size,
        learning_rate: pretrain.learning_rate,
        seed: pretrain.seed,
        mode: TrainMode::Full,
        ..TrainConfig::default()
    };
    let outcome = trainer::train_with_validation(model, &train_set, &val_set, &cfg)?;
    let mut base = outcome.model;
    base.params_mut().freeze_all();
    Ok((base, outcome.log))
}
