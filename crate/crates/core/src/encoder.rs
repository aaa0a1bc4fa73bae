//! Dual-tower text/image encoder with a cross-attention fusion block.
//!
//! Text tower: token + positional embeddings, self-attention blocks, final
//! layer norm, the EOS position projected to the joint space.
//!
//! Image tower: non-overlapping `p×p` patches linearly embedded, positional
//! embeddings, self-attention blocks. A fusion stage then lets a small set of
//! learned query tokens (text width) cross-attend over the patch sequence.
//! The image embedding is the projection of
//! `mean(LN(patches)) + mean(LN(fused queries))`.
//!
//! Both embeddings are L2-normalized, so every emitted vector has unit norm.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::nn::{
    self, block::CrossBlockCache, block::SelfBlockCache, AttentionMode, CrossAttentionBlock, LayerNorm,
    LayerNormCache, Linear, LinearCache, MultiHeadAttention, SelfAttentionBlock,
};
use crate::params::{Grads, ParamStore};
use crate::tensor::{self, Tensor};
use crate::tokenizer::{Tokenizer, EOS_ID, MAX_TOKENS};

/// Initial logit scale, `ln(1/0.07)`.
pub const INITIAL_LOGIT_SCALE: f32 = 2.659_26;
/// Upper bound on `exp(logit_scale)`.
pub const MAX_LOGIT_SCALE: f32 = 100.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub model_dim: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub text_blocks: usize,
    pub image_blocks: usize,
    pub fusion_blocks: usize,
    pub mlp_hidden: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub fusion_queries: usize,
    pub conditioning_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            embed_dim: 32,
            num_heads: 4,
            text_blocks: 2,
            image_blocks: 2,
            fusion_blocks: 1,
            mlp_hidden: 128,
            image_size: 64,
            patch_size: 8,
            fusion_queries: 8,
            conditioning_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model_dim", self.model_dim),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("mlp_hidden", self.mlp_hidden),
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("fusion_queries", self.fusion_queries),
            ("conditioning_dim", self.conditioning_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f32>,
    pub modality: Modality,
}

impl Embedding {
    pub fn new(values: Vec<f32>, modality: Modality) -> Self {
        Self { values, modality }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f32 {
        tensor::l2_norm(&self.values)
    }
}

/// The pooled vector handed to a generator backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningVector(pub Vec<f32>);

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    tokenizer: Tokenizer,
    pub(crate) params: ParamStore,
    tok_emb_key: String,
    text_pos_key: String,
    pub(crate) text_blocks: Vec<SelfAttentionBlock>,
    text_ln: LayerNorm,
    text_proj: Linear,
    patch_embed: Linear,
    image_pos_key: String,
    pub(crate) image_blocks: Vec<SelfAttentionBlock>,
    image_ln: LayerNorm,
    queries_key: String,
    pub(crate) fusion_blocks: Vec<CrossAttentionBlock>,
    fusion_ln: LayerNorm,
    image_proj: Linear,
    logit_scale_key: String,
    cond_proj: Linear,
}

/// Recorded activations of one text forward pass.
#[derive(Debug, Clone)]
pub struct TextCache {
    tokens: Vec<u32>,
    blocks: Vec<SelfBlockCache>,
    ln: LayerNormCache,
    pool_index: usize,
    seq_len: usize,
    proj: LinearCache,
    unit: Vec<f32>,
    norm: f32,
}

/// Recorded activations of one image forward pass.
#[derive(Debug, Clone)]
pub struct ImageCache {
    patch: LinearCache,
    blocks: Vec<SelfBlockCache>,
    ln: LayerNormCache,
    fusion: Vec<CrossBlockCache>,
    fusion_ln: LayerNormCache,
    proj: LinearCache,
    unit: Vec<f32>,
    norm: f32,
}

impl EncoderModel {
    /// Freshly initialized model. Every parameter except the conditioning
    /// projection starts trainable.
    pub fn new(config: EncoderConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.model_dim;
        let vocab = tokenizer.vocab_size();

        let tok_emb_key = "text.token_embedding".to_string();
        p.insert(&tok_emb_key, Tensor::randn(&[vocab, d], 0.5, &mut rng), true)?;
        let text_pos_key = "text.position_embedding".to_string();
        p.insert(&text_pos_key, Tensor::randn(&[MAX_TOKENS, d], 0.1, &mut rng), true)?;
        let text_blocks = (0..config.text_blocks)
            .map(|i| {
                SelfAttentionBlock::register(&mut p, &format!("text.self.{i}"), d, config.num_heads, config.mlp_hidden, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let text_ln = LayerNorm::register(&mut p, "text.final_ln", d)?;
        let text_proj = Linear::register(&mut p, "text.projection", d, config.embed_dim, false, 1.0 / (d as f32).sqrt(), &mut rng)?;

        let patch_dim = config.patch_size * config.patch_size;
        let patch_embed = Linear::register(&mut p, "image.patch_embedding", patch_dim, d, true, 1.0 / (patch_dim as f32).sqrt(), &mut rng)?;
        let image_pos_key = "image.position_embedding".to_string();
        p.insert(&image_pos_key, Tensor::randn(&[config.num_patches(), d], 0.1, &mut rng), true)?;
        let image_blocks = (0..config.image_blocks)
            .map(|i| {
                SelfAttentionBlock::register(&mut p, &format!("image.self.{i}"), d, config.num_heads, config.mlp_hidden, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let image_ln = LayerNorm::register(&mut p, "image.final_ln", d)?;

        let queries_key = "fusion.queries".to_string();
        p.insert(&queries_key, Tensor::randn(&[config.fusion_queries, d], 0.5, &mut rng), true)?;
        let fusion_blocks = (0..config.fusion_blocks)
            .map(|i| {
                CrossAttentionBlock::register(&mut p, &format!("fusion.cross.{i}"), d, config.num_heads, config.mlp_hidden, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let fusion_ln = LayerNorm::register(&mut p, "fusion.final_ln", d)?;
        let image_proj = Linear::register(&mut p, "image.projection", d, config.embed_dim, false, 1.0 / (d as f32).sqrt(), &mut rng)?;

        let logit_scale_key = "logit_scale".to_string();
        p.insert(&logit_scale_key, Tensor::vector(&[INITIAL_LOGIT_SCALE]), true)?;

        // Identity-like: conditioning[i] = embedding[i] for i < min(e, c).
        let cond_proj = Linear::register(&mut p, "conditioning.projection", config.embed_dim, config.conditioning_dim, false, 0.0, &mut rng)?;
        {
            let w = p.get_mut(&cond_proj.weight_key).expect("registered");
            let e = config.embed_dim;
            for i in 0..config.conditioning_dim.min(e) {
                w.data_mut()[i * e + i] = 1.0;
            }
        }
        p.set_trainable(&cond_proj.weight_key, false);

        Ok(Self {
            config,
            tokenizer,
            params: p,
            tok_emb_key,
            text_pos_key,
            text_blocks,
            text_ln,
            text_proj,
            patch_embed,
            image_pos_key,
            image_blocks,
            image_ln,
            queries_key,
            fusion_blocks,
            fusion_ln,
            image_proj,
            logit_scale_key,
            cond_proj,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn logit_scale_key(&self) -> &str {
        &self.logit_scale_key
    }

    pub fn conditioning_key(&self) -> &str {
        &self.cond_proj.weight_key
    }

    /// `exp(logit_scale)`, clamped to [`MAX_LOGIT_SCALE`].
    pub fn logit_scale(&self) -> f32 {
        self.params.get(&self.logit_scale_key).data()[0].exp().min(MAX_LOGIT_SCALE)
    }

    pub(crate) fn attention_blocks(&self) -> impl Iterator<Item = &MultiHeadAttention> {
        self.text_blocks
            .iter()
            .chain(&self.image_blocks)
            .map(|b| &b.attn)
            .chain(self.fusion_blocks.iter().map(|b| &b.attn))
    }

    pub(crate) fn attention_blocks_mut(&mut self) -> impl Iterator<Item = &mut MultiHeadAttention> {
        self.text_blocks
            .iter_mut()
            .chain(self.image_blocks.iter_mut())
            .map(|b| &mut b.attn)
            .chain(self.fusion_blocks.iter_mut().map(|b| &mut b.attn))
    }

    /// Self-attention blocks of both towers and cross-attention fusion blocks.
    pub fn attention_block_names(&self, mode: AttentionMode) -> Vec<String> {
        self.attention_blocks()
            .filter(|a| a.mode == mode)
            .map(|a| a.name.clone())
            .collect()
    }

    /// Marks every parameter trainable except the conditioning projection.
    pub fn unfreeze_all(&mut self) {
        let cond = self.cond_proj.weight_key.clone();
        for (name, p) in self.params.iter_mut() {
            p.trainable = name != cond;
        }
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        self.tokenizer.encode(text)
    }

    // ----- text tower -------------------------------------------------------

    pub fn text_forward(&self, tokens: &[u32]) -> Result<(Vec<f32>, TextCache)> {
        self.tokenizer.validate_ids(tokens)?;
        let d = self.config.model_dim;
        let emb = self.params.get(&self.tok_emb_key);
        let pos = self.params.get(&self.text_pos_key);
        let mut x = Vec::with_capacity(tokens.len() * d);
        for (i, &t) in tokens.iter().enumerate() {
            x.extend(emb.row(t as usize).iter().zip(pos.row(i)).map(|(a, b)| a + b));
        }
        let mut x = Tensor::new(vec![tokens.len(), d], x)?;
        let mut blocks = Vec::with_capacity(self.text_blocks.len());
        for b in &self.text_blocks {
            let (y, c) = b.forward(&self.params, &x)?;
            blocks.push(c);
            x = y;
        }
        let (h, ln) = self.text_ln.forward(&self.params, &x)?;
        let pool_index = tokens.iter().rposition(|&t| t == EOS_ID).unwrap_or(tokens.len() - 1);
        let pooled = Tensor::new(vec![1, d], h.row(pool_index).to_vec())?;
        let (z, proj) = self.text_proj.forward(&self.params, &pooled)?;
        let (unit, norm) = nn::l2_normalize(z.data());
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::NonFinite(format!("text embedding norm {norm}")));
        }
        Ok((
            unit.clone(),
            TextCache {
                tokens: tokens.to_vec(),
                blocks,
                ln,
                pool_index,
                seq_len: tokens.len(),
                proj,
                unit,
                norm,
            },
        ))
    }

    pub fn text_backward(&self, cache: &TextCache, d_unit: &[f32], grads: &mut Grads) -> Result<()> {
        let d = self.config.model_dim;
        let dz = nn::l2_normalize_backward(&cache.unit, cache.norm, d_unit);
        let dz = Tensor::new(vec![1, self.config.embed_dim], dz)?;
        let dpooled = self.text_proj.backward(&self.params, &cache.proj, &dz, grads)?;
        let mut dh = Tensor::zeros(&[cache.seq_len, d]);
        dh.row_mut(cache.pool_index).copy_from_slice(dpooled.data());
        let mut dx = self.text_ln.backward(&self.params, &cache.ln, &dh, grads)?;
        for (b, c) in self.text_blocks.iter().zip(&cache.blocks).rev() {
            dx = b.backward(&self.params, c, &dx, grads)?;
        }
        if self.params.is_trainable(&self.tok_emb_key) {
            let shape = self.params.get(&self.tok_emb_key).shape().to_vec();
            let g = grads.entry(&self.tok_emb_key, &shape);
            for (i, &t) in cache.tokens.iter().enumerate() {
                tensor::axpy(1.0, dx.row(i), g.row_mut(t as usize));
            }
        }
        if self.params.is_trainable(&self.text_pos_key) {
            let g = grads.entry(&self.text_pos_key, &[MAX_TOKENS, d]);
            for i in 0..cache.seq_len {
                tensor::axpy(1.0, dx.row(i), g.row_mut(i));
            }
        }
        Ok(())
    }

    /// Unit-norm text embedding.
    pub fn encode_text(&self, tokens: &[u32]) -> Result<Embedding> {
        Ok(Embedding::new(self.text_forward(tokens)?.0, Modality::Text))
    }

    pub fn encode_prompt(&self, text: &str) -> Result<Embedding> {
        self.encode_text(&self.tokenize(text)?)
    }

    pub fn encode_texts(&self, batch: &[Vec<u32>]) -> Result<Vec<Embedding>> {
        batch.par_iter().map(|t| self.encode_text(t)).collect()
    }

    // ----- image tower ------------------------------------------------------

    /// Splits the image into row-major patches scaled to [-1, 1].
    fn patches(&self, image: &GrayImage) -> Result<Tensor> {
        let size = self.config.image_size;
        image.ensure_size(size, size)?;
        let p = self.config.patch_size;
        let side = size / p;
        let mut data = Vec::with_capacity(size * size);
        for py in 0..side {
            for px in 0..side {
                for y in 0..p {
                    for x in 0..p {
                        let v = image.get(px * p + x, py * p + y);
                        data.push(f32::from(v) / 127.5 - 1.0);
                    }
                }
            }
        }
        Tensor::new(vec![side * side, p * p], data)
    }

    /// Patch sequence after the image self-attention blocks, plus the output of each block.
    fn image_trunk(&self, image: &GrayImage) -> Result<(Tensor, LinearCache, Vec<SelfBlockCache>, Vec<Tensor>)> {
        let patches = self.patches(image)?;
        let (mut x, patch) = self.patch_embed.forward(&self.params, &patches)?;
        x.add_assign(self.params.get(&self.image_pos_key));
        let mut caches = Vec::with_capacity(self.image_blocks.len());
        let mut outputs = Vec::with_capacity(self.image_blocks.len());
        for b in &self.image_blocks {
            let (y, c) = b.forward(&self.params, &x)?;
            caches.push(c);
            outputs.push(y.clone());
            x = y;
        }
        Ok((x, patch, caches, outputs))
    }

    pub fn image_forward(&self, image: &GrayImage) -> Result<(Vec<f32>, ImageCache)> {
        let (z, patch, blocks, _) = self.image_trunk(image)?;
        let (hz, ln) = self.image_ln.forward(&self.params, &z)?;
        let mut q = self.params.get(&self.queries_key).clone();
        let mut fusion = Vec::with_capacity(self.fusion_blocks.len());
        for b in &self.fusion_blocks {
            let (y, c) = b.forward(&self.params, &q, &z)?;
            fusion.push(c);
            q = y;
        }
        let (hq, fusion_ln) = self.fusion_ln.forward(&self.params, &q)?;
        let mut pooled = nn::mean_rows(&hz);
        tensor::axpy(1.0, &nn::mean_rows(&hq), &mut pooled);
        let pooled = Tensor::new(vec![1, self.config.model_dim], pooled)?;
        let (e, proj) = self.image_proj.forward(&self.params, &pooled)?;
        let (unit, norm) = nn::l2_normalize(e.data());
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::NonFinite(format!("image embedding norm {norm}")));
        }
        Ok((
            unit.clone(),
            ImageCache {
                patch,
                blocks,
                ln,
                fusion,
                fusion_ln,
                proj,
                unit,
                norm,
            },
        ))
    }

    pub fn image_backward(&self, cache: &ImageCache, d_unit: &[f32], grads: &mut Grads) -> Result<()> {
        let d = self.config.model_dim;
        let de = nn::l2_normalize_backward(&cache.unit, cache.norm, d_unit);
        let de = Tensor::new(vec![1, self.config.embed_dim], de)?;
        let dpooled = self.image_proj.backward(&self.params, &cache.proj, &de, grads)?;

        let nq = self.config.fusion_queries;
        let dhq = nn::mean_rows_backward(dpooled.data(), nq);
        let mut dq = self.fusion_ln.backward(&self.params, &cache.fusion_ln, &dhq, grads)?;
        let mut dz = Tensor::zeros(&[self.config.num_patches(), d]);
        for (b, c) in self.fusion_blocks.iter().zip(&cache.fusion).rev() {
            let (dq_in, dkv) = b.backward(&self.params, c, &dq, grads)?;
            dz.add_assign(&dkv);
            dq = dq_in;
        }
        if self.params.is_trainable(&self.queries_key) {
            grads.accumulate(&self.queries_key, dq.data(), &[nq, d]);
        }

        let dhz = nn::mean_rows_backward(dpooled.data(), self.config.num_patches());
        dz.add_assign(&self.image_ln.backward(&self.params, &cache.ln, &dhz, grads)?);
        for (b, c) in self.image_blocks.iter().zip(&cache.blocks).rev() {
            dz = b.backward(&self.params, c, &dz, grads)?;
        }
        if self.params.is_trainable(&self.image_pos_key) {
            grads.accumulate(&self.image_pos_key, dz.data(), &[self.config.num_patches(), d]);
        }
        let needs_patch_grads = self
            .patch_embed
            .base_keys()
            .iter()
            .any(|k| self.params.is_trainable(k));
        if needs_patch_grads {
            self.patch_embed.backward(&self.params, &cache.patch, &dz, grads)?;
        }
        Ok(())
    }

    pub fn encode_image(&self, image: &GrayImage) -> Result<Embedding> {
        Ok(Embedding::new(self.image_forward(image)?.0, Modality::Image))
    }

    pub fn encode_images(&self, images: &[GrayImage]) -> Result<Vec<Embedding>> {
        images.par_iter().map(|im| self.encode_image(im)).collect()
    }

    /// Patch features after each image self-attention block, `[patches × d]` each.
    pub fn image_features(&self, image: &GrayImage) -> Result<Vec<Tensor>> {
        Ok(self.image_trunk(image)?.3)
    }

    // ----- joint space ------------------------------------------------------

    /// Linear map of a joint embedding to the backend conditioning width.
    pub fn project_conditioning(&self, e: &Embedding, backend_dim: usize) -> Result<ConditioningVector> {
        if backend_dim != self.config.conditioning_dim {
            return Err(Error::Config(format!(
                "backend expects {backend_dim}-dim conditioning, encoder projects to {}",
                self.config.conditioning_dim
            )));
        }
        if e.dim() != self.config.embed_dim {
            return Err(Error::dim("conditioning input", &[self.config.embed_dim], &[e.dim()]));
        }
        let x = Tensor::new(vec![1, e.dim()], e.values.clone())?;
        let y = self.cond_proj.apply(&self.params, &x)?;
        Ok(ConditioningVector(y.into_data()))
    }
}

/// `normalize((a + b)/2)`.
pub fn combine(text: &Embedding, image: &Embedding) -> Result<Embedding> {
    combine_weighted(text, image, 0.5)
}

/// `normalize(w·text + (1−w)·image)`.
pub fn combine_weighted(text: &Embedding, image: &Embedding, text_weight: f32) -> Result<Embedding> {
    if text.dim() != image.dim() {
        return Err(Error::dim("combine", &[text.dim()], &[image.dim()]));
    }
    if !(0.0..=1.0).contains(&text_weight) {
        return Err(Error::Validation(format!("text weight {text_weight} outside [0, 1]")));
    }
    let mixed: Vec<f32> = text
        .values
        .iter()
        .zip(&image.values)
        .map(|(a, b)| text_weight * a + (1.0 - text_weight) * b)
        .collect();
    let norm = tensor::l2_norm(&mixed);
    if norm <= 1e-6 {
        return Err(Error::DegenerateCombination);
    }
    Ok(Embedding::new(mixed.iter().map(|v| v / norm).collect(), Modality::Combined))
}

/// Cosine similarity of two unit-norm embeddings.
pub fn clip_score(a: &Embedding, b: &Embedding) -> f32 {
    tensor::dot(&a.values, &b.values).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec(), Modality::Text)
    }

    fn small() -> EncoderModel {
        let tok = Tokenizer::build(["a male with a square jaw"], 2048);
        EncoderModel::new(EncoderConfig::default(), tok, 5).unwrap()
    }

    #[test]
    fn combine_is_idempotent_on_equal_inputs() {
        let v = unit(&[0.6, 0.8]);
        assert_eq!(combine(&v, &v).unwrap().values, v.values);
    }

    #[test]
    fn combine_of_orthogonal_units() {
        let c = combine(&unit(&[1.0, 0.0]), &unit(&[0.0, 1.0])).unwrap();
        let h = 1.0 / 2f32.sqrt();
        assert!((c.values[0] - h).abs() < 1e-7 && (c.values[1] - h).abs() < 1e-7);
    }

    #[test]
    fn combine_of_opposites_is_degenerate() {
        let err = combine(&unit(&[0.6, -0.8]), &unit(&[-0.6, 0.8])).unwrap_err();
        assert!(matches!(err, Error::DegenerateCombination));
    }

    #[test]
    fn clip_score_examples() {
        let a = unit(&[0.6, 0.8]);
        assert!((clip_score(&a, &a) - 1.0).abs() < 1e-7);
        assert_eq!(clip_score(&unit(&[1.0, 0.0]), &unit(&[0.0, 1.0])), 0.0);
        assert!((clip_score(&a, &unit(&[-0.6, -0.8])) + 1.0).abs() < 1e-7);
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let m = small();
        let ids = m.tokenize("a male with a square jaw").unwrap();
        let t1 = m.encode_text(&ids).unwrap();
        let t2 = m.encode_text(&ids).unwrap();
        assert_eq!(t1, t2);
        assert!((t1.norm() - 1.0).abs() < 1e-5);
        let img = GrayImage::from_fn(64, 64, |x, y| ((x * 3 + y * 5) % 256) as u8);
        let i1 = m.encode_image(&img).unwrap();
        assert_eq!(i1, m.encode_image(&img).unwrap());
        assert!((i1.norm() - 1.0).abs() < 1e-5);
        assert_eq!(i1.dim(), t1.dim());
    }

    #[test]
    fn wrong_image_size_names_expected_size() {
        let m = small();
        let err = m.encode_image(&GrayImage::filled(32, 32, 0)).unwrap_err();
        assert!(err.to_string().contains("[64, 64]"), "{err}");
    }

    #[test]
    fn unknown_token_is_rejected() {
        let m = small();
        assert!(m.encode_text(&[1, 99_999, 2]).is_err());
    }

    #[test]
    fn conditioning_projection_contracts() {
        let mut m = small();
        let e = m.encode_prompt("a square jaw").unwrap();
        let c = m.project_conditioning(&e, 32).unwrap();
        assert_eq!(c.0, e.values);
        assert!(matches!(m.project_conditioning(&e, 16), Err(Error::Config(_))));
        let key = m.conditioning_key().to_string();
        m.params_mut().get_mut(&key).unwrap().data_mut().fill(0.0);
        assert!(m.project_conditioning(&e, 32).unwrap().0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn batching_matches_single_items() {
        let m = small();
        let batch: Vec<Vec<u32>> = ["a male", "square jaw", "a male with a jaw"]
            .iter()
            .map(|s| m.tokenize(s).unwrap())
            .collect();
        let batched = m.encode_texts(&batch).unwrap();
        let mut reversed = batch.clone();
        reversed.reverse();
        let rev = m.encode_texts(&reversed).unwrap();
        for (i, e) in batched.iter().enumerate() {
            assert_eq!(e, &m.encode_text(&batch[i]).unwrap());
            assert_eq!(e, &rev[batch.len() - 1 - i]);
        }
    }
}
