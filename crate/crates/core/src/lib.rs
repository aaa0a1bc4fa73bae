//! Text/image sketch refinement: a dual-tower encoder with low-rank
//! adapters, contrastive fine-tuning, an iterative refinement loop over a
//! pluggable generator backend, and image-quality metrics.

pub mod dataset;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod lora;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod refine;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use dataset::{PromptTemplate, SketchPair};
pub use encoder::{clip_score, combine, ConditioningVector, Embedding, EncoderConfig, EncoderModel, Modality};
pub use error::{Error, Result};
pub use image::GrayImage;
pub use lora::{LoraAdapter, LoraConfig, LoraTargets};
pub use metrics::{MetricReport, MetricValues, ReferenceKind};
pub use refine::{GeneratorBackend, ModelKind, RefinementConfig, RefinementEngine, RefinementSession, ToyLatentBackend};
pub use tensor::Tensor;
pub use tokenizer::Tokenizer;
pub use trainer::{TrainConfig, TrainLog, TrainMode};
