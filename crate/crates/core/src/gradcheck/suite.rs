//! Finite-difference checks over one small fragment of every layer type.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{gradient_check, weighted_sum_loss, GradCheckReport, DEFAULT_EPS, DEFAULT_TOLERANCE};
use crate::dataset::synth_fixture;
use crate::encoder::{EncoderConfig, EncoderModel, Modality};
use crate::error::Result;
use crate::image::GrayImage;
use crate::lora::{LoraConfig, LoraTargets};
use crate::nn::activation::{gelu_backward, gelu_forward};
use crate::nn::{
    AdapterSlot, AttentionMode, CrossAttentionBlock, LayerNorm, Linear, Mlp,
    MultiHeadAttention, SelfAttentionBlock,
};
use crate::params::{Grads, ParamStore};
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;
use crate::trainer::ContrastiveStep;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub fragment: &'static str,
    /// Finite-difference step used for this fragment.
    pub eps: f32,
    /// Whole-model wiring check rather than a single layer type.
    pub composite: bool,
    pub num_params: usize,
    pub report: GradCheckReport,
}

/// Step and tolerance for whole-encoder fragments. Their loss passes through
/// a dozen f32 stages: at the layer step the rounding noise in the difference
/// quotient (about 1e-4) rivals the smallest gradients, and at larger steps
/// curvature dominates, so these only confirm the wiring between layers.
pub const COMPOSITE_EPS: f32 = 3e-3;
pub const COMPOSITE_TOLERANCE: f32 = 1e-2;

fn check(
    fragment: &'static str,
    store: &ParamStore,
    loss_fn: impl FnMut(&ParamStore) -> Result<(f64, Grads)>,
) -> Result<SuiteEntry> {
    Ok(SuiteEntry {
        fragment,
        eps: DEFAULT_EPS,
        composite: false,
        num_params: store.num_scalars(),
        report: gradient_check(store, DEFAULT_EPS, DEFAULT_TOLERANCE, loss_fn)?,
    })
}

fn check_composite(
    fragment: &'static str,
    store: &ParamStore,
    loss_fn: impl FnMut(&ParamStore) -> Result<(f64, Grads)>,
) -> Result<SuiteEntry> {
    Ok(SuiteEntry {
        fragment,
        eps: COMPOSITE_EPS,
        composite: true,
        num_params: store.num_scalars(),
        report: gradient_check(store, COMPOSITE_EPS, COMPOSITE_TOLERANCE, loss_fn)?,
    })
}

/// Leaves only parameters whose name starts with one of `prefixes` trainable.
fn train_only(model: &mut EncoderModel, prefixes: &[&str]) {
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    for n in names {
        let keep = prefixes.iter().any(|p| n.starts_with(p));
        model.params_mut().set_trainable(&n, keep);
    }
}

/// `loss = w · unit_embedding` through one tower.
fn tower_loss(model: &EncoderModel, modality: Modality, text: &str, image: &GrayImage, w: Tensor) -> impl FnMut(&ParamStore) -> Result<(f64, Grads)> {
    let mut work = model.clone();
    let tokens = model.tokenize(text).expect("non-empty");
    let image = image.clone();
    move |s: &ParamStore| {
        *work.params_mut() = s.clone();
        let mut g = Grads::new();
        let unit = match modality {
            Modality::Text => {
                let (u, c) = work.text_forward(&tokens)?;
                work.text_backward(&c, w.data(), &mut g)?;
                u
            }
            _ => {
                let (u, c) = work.image_forward(&image)?;
                work.image_backward(&c, w.data(), &mut g)?;
                u
            }
        };
        let (loss, _) = weighted_sum_loss(&Tensor::new(vec![unit.len()], unit)?, &w);
        Ok((loss, g))
    }
}

/// Adds a rank-`rank` adapter with random `A` and `B` (so both receive
/// gradient) and freezes the base weights.
fn attach_adapter(store: &mut ParamStore, layer: &mut Linear, rank: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let a_key = format!("{}.lora_a", layer.name);
    let b_key = format!("{}.lora_b", layer.name);
    store.insert(&a_key, Tensor::randn(&[rank, layer.in_dim], 0.5, rng), true)?;
    store.insert(&b_key, Tensor::randn(&[layer.out_dim, rank], 0.5, rng), true)?;
    for k in layer.base_keys() {
        store.set_trainable(k, false);
    }
    layer.adapter = Some(AdapterSlot {
        a_key,
        b_key,
        rank,
        alpha: 4.0,
    });
    Ok(())
}

fn tiny_encoder(seed: u64) -> Result<EncoderModel> {
    let cfg = EncoderConfig {
        model_dim: 8,
        embed_dim: 4,
        num_heads: 2,
        text_blocks: 1,
        image_blocks: 1,
        fusion_blocks: 1,
        mlp_hidden: 8,
        image_size: 8,
        patch_size: 4,
        fusion_queries: 2,
        conditioning_dim: 4,
    };
    let tok = Tokenizer::build(["a male with a square jaw", "a female with round eyes"], 512);
    EncoderModel::new(cfg, tok, seed)
}

fn encoder_batch(seed: u64) -> (Vec<&'static str>, Vec<GrayImage>) {
    let images = synth_fixture(3, 1, seed)
        .expect("valid fixture")
        .into_iter()
        .map(|p| p.image.resize_nearest(8, 8))
        .collect();
    (vec!["a male with a square jaw", "a female with round eyes", "a male with round eyes"], images)
}

fn encoder_loss(model: &EncoderModel, texts: &[&str], images: &[GrayImage]) -> impl FnMut(&ParamStore) -> Result<(f64, Grads)> {
    let mut work = model.clone();
    let tokens: Vec<Vec<u32>> = texts.iter().map(|t| model.tokenize(t).expect("non-empty")).collect();
    let images = images.to_vec();
    move |s: &ParamStore| {
        *work.params_mut() = s.clone();
        let mut step = ContrastiveStep::new();
        let loss = step.forward(&work, &tokens, &images)?;
        Ok((loss, step.backward(&work)?))
    }
}

/// Runs every fragment; each stays under the parameter limit.
pub fn standard_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    {
        let mut store = ParamStore::new();
        let fc = Linear::register(&mut store, "linear", 3, 4, true, 0.5, &mut rng)?;
        store.get_mut("linear.bias").expect("bias").data_mut().copy_from_slice(&[0.1, -0.2, 0.3, 0.05]);
        let x = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[5, 4], 1.0, &mut rng);
        out.push(check("linear", &store, |s| {
            let (y, c) = fc.forward(s, &x)?;
            let (loss, dy) = weighted_sum_loss(&y, &w);
            let mut g = Grads::new();
            fc.backward(s, &c, &dy, &mut g)?;
            Ok((loss, g))
        })?);
    }
    {
        let mut store = ParamStore::new();
        let mut fc = Linear::register(&mut store, "lora_linear", 6, 5, true, 0.5, &mut rng)?;
        attach_adapter(&mut store, &mut fc, 2, &mut rng)?;
        let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 5], 1.0, &mut rng);
        out.push(check("lora_linear", &store, |s| {
            let (y, c) = fc.forward(s, &x)?;
            let (loss, dy) = weighted_sum_loss(&y, &w);
            let mut g = Grads::new();
            fc.backward(s, &c, &dy, &mut g)?;
            Ok((loss, g))
        })?);
    }
    {
        let mut store = ParamStore::new();
        let ln = LayerNorm::register(&mut store, "layer_norm", 6)?;
        *store.get_mut("layer_norm.weight").expect("gamma") = Tensor::randn(&[6], 1.0, &mut rng);
        *store.get_mut("layer_norm.bias").expect("beta") = Tensor::randn(&[6], 1.0, &mut rng);
        let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 6], 1.0, &mut rng);
        out.push(check("layer_norm", &store, |s| {
            let (y, c) = ln.forward(s, &x)?;
            let (loss, dy) = weighted_sum_loss(&y, &w);
            let mut g = Grads::new();
            ln.backward(s, &c, &dy, &mut g)?;
            Ok((loss, g))
        })?);
    }
    {
        let mut store = ParamStore::new();
        let fc = Linear::register(&mut store, "gelu", 4, 6, true, 1.0, &mut rng)?;
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 6], 1.0, &mut rng);
        out.push(check("gelu", &store, |s| {
            let (pre, c) = fc.forward(s, &x)?;
            let (loss, dy) = weighted_sum_loss(&gelu_forward(&pre), &w);
            let mut g = Grads::new();
            fc.backward(s, &c, &gelu_backward(&pre, &dy), &mut g)?;
            Ok((loss, g))
        })?);
    }
    {
        let mut store = ParamStore::new();
        let mlp = Mlp::register(&mut store, "mlp", 6, 10, &mut rng)?;
        let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 6], 1.0, &mut rng);
        out.push(check("mlp", &store, |s| {
            let (y, c) = mlp.forward(s, &x)?;
            let (loss, dy) = weighted_sum_loss(&y, &w);
            let mut g = Grads::new();
            mlp.backward(s, &c, &dy, &mut g)?;
            Ok((loss, g))
        })?);
    }
    {
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::register(&mut store, "self_attention", AttentionMode::SelfAttention, 8, 2, &mut rng)?;
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 8], 1.0, &mut rng);
        out.push(check("self_attention", &store, |s| {
            let (y, c) = attn.forward(s, &x, &x)?;
            let (loss, dy) = weighted_sum_loss(&y, &w);
            let mut g = Grads::new();
            attn.backward(s, &c, &dy, &mut g)?;
            Ok((loss, g))
        })?);
    }
    {
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::register(&mut store, "cross_attention", AttentionMode::Cross, 8, 2, &mut rng)?;
        let q = Tensor::randn(&[2, 8], 1.0, &mut rng);
        let kv = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let w = Tensor::randn(&[2, 8], 1.0, &mut rng);
        out.push(check("cross_attention", &store, |s| {
            let (y, c) = attn.forward(s, &q, &kv)?;
            let (loss, dy) = weighted_sum_loss(&y, &w);
            let mut g = Grads::new();
            attn.backward(s, &c, &dy, &mut g)?;
            Ok((loss, g))
        })?);
    }
    {
        let mut store = ParamStore::new();
        let mut attn = MultiHeadAttention::register(&mut store, "lora_attention", AttentionMode::SelfAttention, 8, 2, &mut rng)?;
        for p in crate::nn::Projection::ALL {
            attach_adapter(&mut store, attn.projection_mut(p), 2, &mut rng)?;
        }
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 8], 1.0, &mut rng);
        out.push(check("lora_attention", &store, |s| {
            let (y, c) = attn.forward(s, &x, &x)?;
            let (loss, dy) = weighted_sum_loss(&y, &w);
            let mut g = Grads::new();
            attn.backward(s, &c, &dy, &mut g)?;
            Ok((loss, g))
        })?);
    }
    {
        let mut store = ParamStore::new();
        let block = SelfAttentionBlock::register(&mut store, "self_block", 8, 2, 12, &mut rng)?;
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 8], 1.0, &mut rng);
        out.push(check("self_block", &store, |s| {
            let (y, c) = block.forward(s, &x)?;
            let (loss, dy) = weighted_sum_loss(&y, &w);
            let mut g = Grads::new();
            block.backward(s, &c, &dy, &mut g)?;
            Ok((loss, g))
        })?);
    }
    {
        let mut store = ParamStore::new();
        let block = CrossAttentionBlock::register(&mut store, "cross_block", 8, 2, 12, &mut rng)?;
        // Small queries keep the residual output, and so its f32 rounding, small.
        let q = Tensor::randn(&[2, 8], 0.3, &mut rng);
        let kv = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let w = Tensor::randn(&[2, 8], 1.0, &mut rng);
        out.push(check("cross_block", &store, |s| {
            let (y, c) = block.forward(s, &q, &kv)?;
            let (loss, dy) = weighted_sum_loss(&y, &w);
            let mut g = Grads::new();
            block.backward(s, &c, &dy, &mut g)?;
            Ok((loss, g))
        })?);
    }
    {
        let mut model = tiny_encoder(seed)?;
        train_only(&mut model, &["text.token_embedding", "text.position_embedding", "text.final_ln", "text.projection"]);
        let (texts, images) = encoder_batch(seed);
        let w = Tensor::randn(&[model.config().embed_dim], 1.0, &mut rng);
        let store = model.params().clone();
        out.push(check("text_tower", &store, tower_loss(&model, Modality::Text, texts[0], &images[0], w))?);
    }
    {
        let mut model = tiny_encoder(seed)?;
        train_only(
            &mut model,
            &["image.patch_embedding", "image.position_embedding", "image.final_ln", "fusion.queries", "fusion.final_ln", "image.projection"],
        );
        let (texts, images) = encoder_batch(seed);
        let w = Tensor::randn(&[model.config().embed_dim], 1.0, &mut rng);
        let store = model.params().clone();
        out.push(check("image_tower", &store, tower_loss(&model, Modality::Image, texts[0], &images[0], w))?);
    }
    {
        let mut model = tiny_encoder(seed)?;
        model.unfreeze_all();
        let (texts, images) = encoder_batch(seed);
        let store = model.params().clone();
        out.push(check_composite("encoder_contrastive", &store, encoder_loss(&model, &texts, &images))?);
    }
    {
        let mut model = tiny_encoder(seed)?;
        model.inject_lora(&LoraConfig { rank: 2, ..LoraConfig::with_targets(LoraTargets::Both) }, seed)?;
        // Non-zero B so the A matrices receive gradient.
        let b_keys: Vec<String> = model
            .params()
            .iter()
            .filter(|(n, _)| n.ends_with(".lora_b"))
            .map(|(n, _)| n.to_string())
            .collect();
        for k in b_keys {
            let shape = model.params().get(&k).shape().to_vec();
            *model.params_mut().get_mut(&k).expect("adapter") = Tensor::randn(&shape, 0.3, &mut rng);
        }
        let (texts, images) = encoder_batch(seed);
        let store = model.params().clone();
        out.push(check_composite("encoder_lora", &store, encoder_loss(&model, &texts, &images))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_fragment_passes() {
        for entry in standard_suite(3).unwrap() {
            println!("{} (eps {})\n{}", entry.fragment, entry.eps, entry.report);
            assert!(entry.num_params < super::super::MAX_PARAMS);
            assert!(entry.report.passed(), "{}:\n{}", entry.fragment, entry.report);
        }
    }
}
