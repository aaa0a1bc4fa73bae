//! Iterative embedding-guided refinement over a pluggable generator backend.
//!
//! Each step encodes the current image to a latent, builds a conditioning
//! vector from the prompt and the current image, and asks the backend for a
//! new image. Three model kinds share the loop: generator only (zero
//! conditioning), the frozen base encoder, and the adapted encoder.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{combine, ConditioningVector, EncoderModel};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::metrics::{MetricReport, MetricValues, ReferenceKind};

pub const DEFAULT_STRENGTH: f32 = 0.3;
pub const DEFAULT_GUIDANCE: f32 = 7.5;
pub const DEFAULT_ITERATIONS: usize = 5;
/// Joins the description and each piece of feedback in a prompt.
pub const FEEDBACK_SEPARATOR: &str = "; ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent(pub Vec<f32>);

/// Image-to-latent-to-image generator. Implementations may be remote, so
/// every call is fallible.
pub trait GeneratorBackend: Send + Sync {
    fn conditioning_dim(&self) -> usize;
    fn latent_dim(&self) -> usize;
    /// `(width, height)` of the images the backend accepts and produces.
    fn image_size(&self) -> (usize, usize);
    fn encode(&self, image: &GrayImage) -> Result<Latent>;
    fn decode(&self, latent: &Latent) -> Result<GrayImage>;
    /// Must return `decode(latent)` when `strength` is 0 and be deterministic
    /// in all arguments.
    fn generate(
        &self,
        latent: &Latent,
        conditioning: &ConditioningVector,
        strength: f32,
        guidance_scale: f32,
        seed: u64,
    ) -> Result<GrayImage>;
}

fn check_generate_args(conditioning: &ConditioningVector, dim: usize, strength: f32, guidance: f32) -> Result<()> {
    if conditioning.0.len() != dim {
        return Err(Error::dim("conditioning vector", &[dim], &[conditioning.0.len()]));
    }
    if conditioning.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("conditioning vector contains non-finite values".into()));
    }
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::Validation(format!("strength {strength} outside [0, 1]")));
    }
    if !(guidance >= 0.0 && guidance.is_finite()) {
        return Err(Error::Validation(format!("guidance scale {guidance} must be finite and non-negative")));
    }
    Ok(())
}

/// Deterministic linear stand-in for a latent diffusion model.
///
/// The encoder `E` has one orthonormal row per 2×2 pixel block (weights ½),
/// in a seeded order with seeded signs, so `decode(encode(x))` replaces every
/// block by its mean and is idempotent after 8-bit quantization.
/// `generate` blends the latent toward `tanh(g·C·c)` with weight `strength`.
#[derive(Debug, Clone)]
pub struct ToyLatentBackend {
    width: usize,
    height: usize,
    conditioning_dim: usize,
    /// Pixel block read by each latent row.
    block_of: Vec<usize>,
    sign: Vec<f32>,
    /// `[latent_dim × conditioning_dim]`, row-major.
    c: Vec<f32>,
}

pub const TOY_BLOCK: usize = 2;

impl ToyLatentBackend {
    pub fn new(width: usize, height: usize, conditioning_dim: usize, seed: u64) -> Result<Self> {
        if width == 0 || height == 0 || !width.is_multiple_of(TOY_BLOCK) || !height.is_multiple_of(TOY_BLOCK) {
            return Err(Error::Config(format!("toy backend needs even, non-zero image sides, got {width}x{height}")));
        }
        if conditioning_dim == 0 {
            return Err(Error::Config("conditioning dimension must be positive".into()));
        }
        let latent_dim = (width / TOY_BLOCK) * (height / TOY_BLOCK);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut block_of: Vec<usize> = (0..latent_dim).collect();
        rand::seq::SliceRandom::shuffle(block_of.as_mut_slice(), &mut rng);
        let sign = (0..latent_dim)
            .map(|_| if rand::Rng::gen_bool(&mut rng, 0.5) { 1.0 } else { -1.0 })
            .collect();
        let normal = Normal::new(0.0f32, 1.0 / (conditioning_dim as f32).sqrt()).expect("valid std");
        let c = (0..latent_dim * conditioning_dim).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self {
            width,
            height,
            conditioning_dim,
            block_of,
            sign,
            c,
        })
    }

    fn block_pixels(&self, block: usize) -> [usize; 4] {
        let bw = self.width / TOY_BLOCK;
        let (bx, by) = (block % bw * TOY_BLOCK, block / bw * TOY_BLOCK);
        let i = by * self.width + bx;
        [i, i + 1, i + self.width, i + self.width + 1]
    }

    /// Dense row `r` of `E`, for inspection and tests.
    pub fn encoder_row(&self, r: usize) -> Vec<f32> {
        let mut row = vec![0.0; self.width * self.height];
        for p in self.block_pixels(self.block_of[r]) {
            row[p] = 0.5 * self.sign[r];
        }
        row
    }

    /// `tanh(g·C·c)`.
    pub fn guidance_direction(&self, conditioning: &ConditioningVector, guidance_scale: f32) -> Vec<f32> {
        self.c
            .chunks_exact(self.conditioning_dim)
            .map(|row| (guidance_scale * crate::tensor::dot(row, &conditioning.0)).tanh())
            .collect()
    }
}

impl GeneratorBackend for ToyLatentBackend {
    fn conditioning_dim(&self) -> usize {
        self.conditioning_dim
    }

    fn latent_dim(&self) -> usize {
        self.block_of.len()
    }

    fn image_size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// `z = E·(pixels/255 − 0.5)`.
    fn encode(&self, image: &GrayImage) -> Result<Latent> {
        image.ensure_size(self.width, self.height)?;
        let px = image.pixels();
        Ok(Latent(
            self.block_of
                .iter()
                .zip(&self.sign)
                .map(|(&b, &s)| {
                    let sum: f32 = self.block_pixels(b).iter().map(|&p| f32::from(px[p]) / 255.0 - 0.5).sum();
                    0.5 * s * sum
                })
                .collect(),
        ))
    }

    /// `clamp(round((Eᵀz + 0.5)·255))`.
    fn decode(&self, latent: &Latent) -> Result<GrayImage> {
        if latent.0.len() != self.latent_dim() {
            return Err(Error::dim("latent", &[self.latent_dim()], &[latent.0.len()]));
        }
        if latent.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("latent contains non-finite values".into()));
        }
        let mut pixels = vec![0u8; self.width * self.height];
        for ((&b, &s), &z) in self.block_of.iter().zip(&self.sign).zip(&latent.0) {
            let v = ((0.5 * s * z + 0.5) * 255.0).round().clamp(0.0, 255.0) as u8;
            for p in self.block_pixels(b) {
                pixels[p] = v;
            }
        }
        GrayImage::new(self.width, self.height, pixels)
    }

    /// `decode((1 − s)·z + s·tanh(g·C·c))`; the seed is accepted and unused
    /// because the toy model has no sampling noise.
    fn generate(
        &self,
        latent: &Latent,
        conditioning: &ConditioningVector,
        strength: f32,
        guidance_scale: f32,
        _seed: u64,
    ) -> Result<GrayImage> {
        check_generate_args(conditioning, self.conditioning_dim, strength, guidance_scale)?;
        if strength == 0.0 {
            return self.decode(latent);
        }
        if latent.0.len() != self.latent_dim() {
            return Err(Error::dim("latent", &[self.latent_dim()], &[latent.0.len()]));
        }
        let dir = self.guidance_direction(conditioning, guidance_scale);
        let blended = latent
            .0
            .iter()
            .zip(&dir)
            .map(|(&z, &d)| (1.0 - strength) * z + strength * d)
            .collect();
        self.decode(&Latent(blended))
    }
}

// ----- configuration ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    /// Generator only, zero conditioning.
    #[serde(rename = "model1")]
    Model1,
    /// Frozen base encoder.
    #[serde(rename = "model2")]
    Model2,
    /// Adapted encoder.
    #[serde(rename = "model3")]
    Model3,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Model1 => "model1",
            ModelKind::Model2 => "model2",
            ModelKind::Model3 => "model3",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "model1" => Ok(ModelKind::Model1),
            "2" | "model2" => Ok(ModelKind::Model2),
            "3" | "model3" => Ok(ModelKind::Model3),
            other => Err(Error::Validation(format!("unknown model kind {other:?}; expected model1, model2 or model3"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    pub strength: f32,
    pub guidance_scale: f32,
    pub iterations: usize,
    pub model_kind: ModelKind,
    pub seed: u64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            strength: DEFAULT_STRENGTH,
            guidance_scale: DEFAULT_GUIDANCE,
            iterations: DEFAULT_ITERATIONS,
            model_kind: ModelKind::Model3,
            seed: 0,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::Validation(format!("strength {} outside [0, 1]", self.strength)));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::Validation(format!("guidance scale {} must be non-negative", self.guidance_scale)));
        }
        if self.iterations == 0 {
            return Err(Error::Validation("iterations must be at least 1".into()));
        }
        Ok(())
    }
}

// ----- sessions ----------------------------------------------------------------

/// Metrics of one output against the previous image and, when the session
/// has one, the ground-truth reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub previous: MetricValues,
    pub ground_truth: Option<MetricValues>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// 1-based; iteration 0 is the input sketch.
    pub index: usize,
    pub feedback: Option<String>,
    pub prompt: String,
    pub conditioning: ConditioningVector,
    /// Encoding of the image this iteration started from.
    pub latent: Latent,
    pub seed: u64,
    pub image: GrayImage,
    pub metrics: IterationMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementSession {
    pub id: String,
    pub description: String,
    pub input: GrayImage,
    pub reference: Option<GrayImage>,
    pub config: RefinementConfig,
    /// Non-empty feedback received so far, in order.
    pub feedback: Vec<String>,
    pub records: Vec<IterationRecord>,
}

impl RefinementSession {
    pub fn new(id: impl Into<String>, description: impl Into<String>, input: GrayImage, config: RefinementConfig) -> Result<Self> {
        config.validate()?;
        let description = description.into();
        if description.trim().is_empty() {
            return Err(Error::Validation("description must not be empty".into()));
        }
        Ok(Self {
            id: id.into(),
            description,
            input,
            reference: None,
            config,
            feedback: Vec::new(),
            records: Vec::new(),
        })
    }

    pub fn with_reference(mut self, reference: GrayImage) -> Self {
        self.reference = Some(reference);
        self
    }

    /// The newest image: the last output, or the input before any step.
    pub fn current_image(&self) -> &GrayImage {
        self.records.last().map_or(&self.input, |r| &r.image)
    }

    /// Image `n`, where 0 is the input.
    pub fn image(&self, n: usize) -> Option<&GrayImage> {
        if n == 0 {
            Some(&self.input)
        } else {
            self.records.get(n - 1).map(|r| &r.image)
        }
    }

    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    /// Reports against the previous iteration and, if set, the ground truth.
    pub fn reports(&self) -> Vec<MetricReport> {
        let mut out = Vec::with_capacity(2);
        if self.reference.is_some() {
            let values: Vec<MetricValues> = self.records.iter().filter_map(|r| r.metrics.ground_truth).collect();
            out.push(MetricReport::from_values(ReferenceKind::GroundTruth, &values));
        }
        let values: Vec<MetricValues> = self.records.iter().map(|r| r.metrics.previous).collect();
        out.push(MetricReport::from_values(ReferenceKind::PreviousIteration, &values));
        out
    }
}

/// Description plus accumulated feedback, cut to fit the token limit.
pub fn build_prompt(model: &EncoderModel, description: &str, feedback: &[String]) -> String {
    let mut prompt = description.trim().to_string();
    for f in feedback {
        prompt.push_str(FEEDBACK_SEPARATOR);
        prompt.push_str(f.trim());
    }
    model.tokenizer().truncate_text(&prompt).trim_end().to_string()
}

/// Runs refinement steps. The backend and encoders are shared read-only, so
/// one engine can drive many sessions concurrently.
#[derive(Clone)]
pub struct RefinementEngine {
    backend: Arc<dyn GeneratorBackend>,
    base: Arc<EncoderModel>,
    adapted: Arc<EncoderModel>,
}

impl RefinementEngine {
    /// `adapted` drives model 3; its base weights without adapters drive
    /// model 2 and also score every iteration.
    pub fn new(backend: Arc<dyn GeneratorBackend>, adapted: EncoderModel) -> Result<Self> {
        let base = adapted.without_adapters();
        Self::with_models(backend, base, adapted)
    }

    pub fn with_models(backend: Arc<dyn GeneratorBackend>, base: EncoderModel, adapted: EncoderModel) -> Result<Self> {
        let (w, h) = backend.image_size();
        for m in [&base, &adapted] {
            let size = m.config().image_size;
            if (w, h) != (size, size) {
                return Err(Error::Config(format!(
                    "backend images are {w}x{h} but the encoder expects {size}x{size}"
                )));
            }
            if m.config().conditioning_dim != backend.conditioning_dim() {
                return Err(Error::Config(format!(
                    "backend expects {}-dim conditioning, encoder projects to {}",
                    backend.conditioning_dim(),
                    m.config().conditioning_dim
                )));
            }
        }
        Ok(Self {
            backend,
            base: Arc::new(base),
            adapted: Arc::new(adapted),
        })
    }

    pub fn backend(&self) -> &dyn GeneratorBackend {
        self.backend.as_ref()
    }

    pub fn base(&self) -> &EncoderModel {
        &self.base
    }

    pub fn adapted(&self) -> &EncoderModel {
        &self.adapted
    }

    /// Starts a session, resizing the input (and reference) to the backend size.
    pub fn start(
        &self,
        id: impl Into<String>,
        description: &str,
        input: &GrayImage,
        reference: Option<&GrayImage>,
        config: RefinementConfig,
    ) -> Result<RefinementSession> {
        let (w, h) = self.backend.image_size();
        let mut session = RefinementSession::new(id, description, input.resize_nearest(w, h), config)?;
        session.reference = reference.map(|r| r.resize_nearest(w, h));
        Ok(session)
    }

    fn encoder_for(&self, kind: ModelKind) -> Option<&EncoderModel> {
        match kind {
            ModelKind::Model1 => None,
            ModelKind::Model2 => Some(&self.base),
            ModelKind::Model3 => Some(&self.adapted),
        }
    }

    pub fn conditioning(&self, kind: ModelKind, prompt: &str, image: &GrayImage) -> Result<ConditioningVector> {
        let dim = self.backend.conditioning_dim();
        match self.encoder_for(kind) {
            None => Ok(ConditioningVector(vec![0.0; dim])),
            Some(model) => {
                let text = model.encode_prompt(prompt)?;
                let img = model.encode_image(image)?;
                model.project_conditioning(&combine(&text, &img)?, dim)
            }
        }
    }

    /// Performs one refinement step and appends its record.
    pub fn step<'s>(&self, session: &'s mut RefinementSession, feedback: Option<&str>) -> Result<&'s IterationRecord> {
        let index = session.records.len() + 1;
        let feedback = feedback.map(str::trim).filter(|f| !f.is_empty()).map(str::to_string);
        let mut all_feedback = session.feedback.clone();
        all_feedback.extend(feedback.clone());
        let prompt = build_prompt(&self.base, &session.description, &all_feedback);

        let current = session.current_image().clone();
        let cfg = &session.config;
        let backend_err = |e: Error| match e {
            e @ Error::Backend { .. } => e,
            e => Error::Backend {
                iteration: index,
                message: e.to_string(),
            },
        };
        let latent = self.backend.encode(&current).map_err(backend_err)?;
        let conditioning = self.conditioning(cfg.model_kind, &prompt, &current)?;
        let seed = cfg.seed ^ index as u64;
        let image = self
            .backend
            .generate(&latent, &conditioning, cfg.strength, cfg.guidance_scale, seed)
            .map_err(backend_err)?;

        let clip = crate::encoder::clip_score(&self.base.encode_prompt(&prompt)?, &self.base.encode_image(&image)?);
        let clip = f64::from(clip);
        let metrics = IterationMetrics {
            previous: MetricValues::compute(&image, &current, clip, &self.base)?,
            ground_truth: session
                .reference
                .as_ref()
                .map(|r| MetricValues::compute(&image, r, clip, &self.base))
                .transpose()?,
        };

        session.feedback = all_feedback;
        session.records.push(IterationRecord {
            index,
            feedback,
            prompt,
            conditioning,
            latent,
            seed,
            image,
            metrics,
        });
        Ok(session.records.last().expect("just pushed"))
    }

    /// Runs `config.iterations` steps; `feedback[i]` (if any) feeds step `i + 1`.
    pub fn run_session(
        &self,
        description: &str,
        input: &GrayImage,
        reference: Option<&GrayImage>,
        config: RefinementConfig,
        feedback: &[Option<String>],
    ) -> Result<RefinementSession> {
        let mut session = self.start("session", description, input, reference, config)?;
        for i in 0..session.config.iterations {
            let f = feedback.get(i).and_then(|f| f.as_deref());
            self.step(&mut session, f)?;
        }
        Ok(session)
    }
}

impl fmt::Debug for RefinementEngine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RefinementEngine")
            .field("latent_dim", &self.backend.latent_dim())
            .field("conditioning_dim", &self.backend.conditioning_dim())
            .field("adapters", &self.adapted.has_adapters())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_fixture;
    use crate::encoder::EncoderConfig;
    use crate::lora::LoraConfig;
    use crate::tokenizer::Tokenizer;

    fn backend() -> ToyLatentBackend {
        ToyLatentBackend::new(64, 64, 32, 11).unwrap()
    }

    fn engine(adapters: bool) -> RefinementEngine {
        let tok = Tokenizer::build(["the suspect is described as a male with a square jaw"], 2048);
        let mut model = EncoderModel::new(EncoderConfig::default(), tok, 2).unwrap();
        if adapters {
            model.inject_lora(&LoraConfig::default(), 3).unwrap();
        }
        RefinementEngine::new(Arc::new(backend()), model).unwrap()
    }

    #[test]
    fn encoder_rows_are_orthonormal() {
        let b = backend();
        for (i, j) in [(0, 0), (0, 1), (5, 900), (1023, 1023), (17, 18)] {
            let d = crate::tensor::dot(&b.encoder_row(i), &b.encoder_row(j));
            let expected = if i == j { 1.0 } else { 0.0 };
            assert!((d - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn mid_gray_encodes_near_zero() {
        let z = backend().encode(&GrayImage::filled(64, 64, 128)).unwrap();
        let offset = 128.0 / 255.0 - 0.5;
        assert!(z.0.iter().all(|v| (v.abs() - 2.0 * offset).abs() < 1e-6));
    }

    #[test]
    fn reconstruction_error_is_bounded_on_the_fixture() {
        let b = backend();
        let mut total = 0.0;
        let mut n = 0.0;
        for p in synth_fixture(4, 8, 5).unwrap() {
            let r = b.decode(&b.encode(&p.image).unwrap()).unwrap();
            for (&x, &y) in p.image.pixels().iter().zip(r.pixels()) {
                total += (f64::from(x) - f64::from(y)).abs();
                n += 1.0;
            }
        }
        assert!(total / n < 16.0, "{}", total / n);
    }

    #[test]
    fn zero_strength_is_decode_and_zero_guidance_shrinks() {
        let b = backend();
        let img = synth_fixture(2, 1, 1).unwrap()[0].image.clone();
        let z = b.encode(&img).unwrap();
        let cond = ConditioningVector(vec![0.3; 32]);
        assert_eq!(b.generate(&z, &cond, 0.0, 7.5, 1).unwrap(), b.decode(&z).unwrap());
        let shrunk = b.generate(&z, &cond, 0.5, 0.0, 1).unwrap();
        let half = Latent(z.0.iter().map(|v| 0.5 * v).collect());
        assert_eq!(shrunk, b.decode(&half).unwrap());
    }

    #[test]
    fn deviation_grows_with_strength() {
        let b = backend();
        let img = synth_fixture(2, 1, 1).unwrap()[0].image.clone();
        let z = b.encode(&img).unwrap();
        let cond = ConditioningVector((0..32).map(|i| (i as f32 * 0.37).sin()).collect());
        let dist = |s: f32| {
            let out = b.encode(&b.generate(&z, &cond, s, 7.5, 0).unwrap()).unwrap();
            out.0.iter().zip(&z.0).map(|(a, b)| (a - b).powi(2)).sum::<f32>().sqrt()
        };
        assert!(dist(0.3) <= dist(0.6));
    }

    #[test]
    fn non_finite_conditioning_is_rejected() {
        let b = backend();
        let z = b.encode(&GrayImage::filled(64, 64, 0)).unwrap();
        let cond = ConditioningVector(vec![f32::NAN; 32]);
        assert!(matches!(b.generate(&z, &cond, 0.3, 7.5, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn model_kind_parses() {
        assert_eq!("3".parse::<ModelKind>().unwrap(), ModelKind::Model3);
        assert_eq!("Model1".parse::<ModelKind>().unwrap(), ModelKind::Model1);
        assert!("model4".parse::<ModelKind>().is_err());
    }

    #[test]
    fn zero_strength_session_is_constant_after_the_first_step() {
        let e = engine(false);
        let img = synth_fixture(2, 1, 4).unwrap()[0].image.clone();
        let cfg = RefinementConfig {
            strength: 0.0,
            model_kind: ModelKind::Model1,
            ..RefinementConfig::default()
        };
        let s = e.run_session("a male", &img, None, cfg, &[]).unwrap();
        let first = &s.records[0].image;
        assert_eq!(first, &e.backend().decode(&e.backend().encode(&img).unwrap()).unwrap());
        assert!(s.records.iter().all(|r| &r.image == first));
        assert!(s.records[1..].iter().all(|r| r.metrics.previous.ssim == 1.0));
    }

    #[test]
    fn latents_chain_through_outputs() {
        let e = engine(true);
        let img = synth_fixture(2, 1, 4).unwrap()[0].image.clone();
        let cfg = RefinementConfig { seed: 2, ..RefinementConfig::default() };
        let s = e.run_session("a male", &img, None, cfg, &[]).unwrap();
        assert_eq!(s.records.len(), 5);
        for w in s.records.windows(2) {
            assert_eq!(w[1].latent, e.backend().encode(&w[0].image).unwrap());
        }
        assert_eq!(s.records[2].seed, 2 ^ 3);
    }

    #[test]
    fn feedback_accumulates_into_the_prompt() {
        let e = engine(false);
        let img = GrayImage::filled(64, 64, 90);
        let cfg = RefinementConfig { model_kind: ModelKind::Model2, ..RefinementConfig::default() };
        let fb = [None, Some("wider jaw".to_string()), Some("  ".to_string()), Some("darker hair".to_string())];
        let s = e.run_session("a male", &img, None, cfg, &fb).unwrap();
        let prompts: Vec<&str> = s.records.iter().map(|r| r.prompt.as_str()).collect();
        assert_eq!(
            prompts,
            ["a male", "a male; wider jaw", "a male; wider jaw", "a male; wider jaw; darker hair", "a male; wider jaw; darker hair"]
        );
    }

    #[test]
    fn reports_have_one_entry_per_iteration() {
        let e = engine(false);
        let pairs = synth_fixture(2, 2, 4).unwrap();
        let s = e
            .run_session("a male", &pairs[0].image, Some(&pairs[1].image), RefinementConfig::default(), &[])
            .unwrap();
        let reports = s.reports();
        assert_eq!(reports.len(), 2);
        assert!(reports.iter().all(|r| r.len() == 5));
    }
}
