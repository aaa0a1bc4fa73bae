use std::sync::Arc;

use proptest::prelude::*;
use sketchloop_core::dataset::{describe, synth_fixture};
use sketchloop_core::refine::build_prompt;
use sketchloop_core::tokenizer::MAX_TOKENS;
use sketchloop_core::*;

fn config() -> EncoderConfig {
    EncoderConfig {
        model_dim: 16,
        embed_dim: 8,
        num_heads: 2,
        text_blocks: 1,
        image_blocks: 1,
        fusion_blocks: 1,
        mlp_hidden: 32,
        image_size: 64,
        patch_size: 16,
        fusion_queries: 2,
        conditioning_dim: 8,
    }
}

fn encoder() -> EncoderModel {
    let tok = Tokenizer::build(["the suspect is described as a man with a scar and a beard"], 512);
    EncoderModel::new(config(), tok, 6).unwrap()
}

fn engine() -> RefinementEngine {
    let mut adapted = encoder();
    adapted.inject_lora(&LoraConfig::default(), 8).unwrap();
    let backend = ToyLatentBackend::new(64, 64, 8, 21).unwrap();
    RefinementEngine::new(Arc::new(backend), adapted).unwrap()
}

fn sketch(seed: u64) -> GrayImage {
    synth_fixture(2, 1, seed).unwrap().remove(0).image
}

fn feedback() -> Vec<Option<String>> {
    vec![Some("thicker eyebrows".into()), None, Some("a scar".into()), None, Some("older".into())]
}

fn cfg(kind: ModelKind) -> RefinementConfig {
    RefinementConfig {
        model_kind: kind,
        seed: 42,
        ..RefinementConfig::default()
    }
}

#[test]
fn model2_and_model3_agree_bitwise_with_fresh_adapters() {
    let e = engine();
    let desc = describe("a man", "a scar");
    let a = e.run_session(&desc, &sketch(1), None, cfg(ModelKind::Model2), &feedback()).unwrap();
    let b = e.run_session(&desc, &sketch(1), None, cfg(ModelKind::Model3), &feedback()).unwrap();
    assert_eq!(a.records.len(), 5);
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.prompt, y.prompt);
        let bits = |v: &[f32]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x.conditioning.0), bits(&y.conditioning.0));
        assert_eq!(x.image, y.image);
    }
}

#[test]
fn five_iteration_sessions_reproduce_bitwise() {
    let desc = describe("a man", "a beard");
    let first = engine().run_session(&desc, &sketch(2), Some(&sketch(3)), cfg(ModelKind::Model3), &feedback()).unwrap();
    let second = engine().run_session(&desc, &sketch(2), Some(&sketch(3)), cfg(ModelKind::Model3), &feedback()).unwrap();
    assert_eq!(first.records.len(), 5);
    for (x, y) in first.records.iter().zip(&second.records) {
        assert_eq!(x.image.pixels(), y.image.pixels());
        assert_eq!(x.seed, y.seed);
    }
    let reports = first.reports();
    assert_eq!(reports.len(), 2);
    for r in &reports {
        assert_eq!(r.len(), 5);
    }
}

#[test]
fn zero_strength_is_a_fixed_point_for_every_model() {
    let e = engine();
    for kind in [ModelKind::Model1, ModelKind::Model2, ModelKind::Model3] {
        let c = RefinementConfig { strength: 0.0, ..cfg(kind) };
        let s = e.run_session("a man with a scar", &sketch(4), None, c, &feedback()).unwrap();
        let first = &s.records[0].image;
        for r in &s.records[1..] {
            assert_eq!(&r.image, first, "{kind:?} iteration {}", r.index);
            assert_eq!(r.metrics.previous.ssim, 1.0);
            assert_eq!(r.metrics.previous.perceptual_distance, 0.0);
        }
    }
}

#[test]
fn each_latent_is_the_encoding_of_the_previous_output() {
    let e = engine();
    let s = e.run_session("a man", &sketch(5), None, cfg(ModelKind::Model1), &[]).unwrap();
    for i in 1..s.records.len() {
        let recomputed = e.backend().encode(&s.records[i - 1].image).unwrap();
        assert_eq!(recomputed, s.records[i].latent);
    }
    let prompts: Vec<&str> = s.records.iter().map(|r| r.prompt.as_str()).collect();
    assert!(prompts.windows(2).all(|w| w[0] == w[1]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prompts_never_exceed_the_token_limit(
        desc in "\\PC{1,200}",
        notes in proptest::collection::vec("\\PC{0,120}", 0..8),
    ) {
        let model = encoder();
        let prompt = build_prompt(&model, &desc, &notes);
        if !prompt.trim().is_empty() {
            let ids = model.tokenize(&prompt).unwrap();
            prop_assert!(ids.len() <= MAX_TOKENS);
            prop_assert!(model.tokenizer().untruncated_len(&prompt) <= MAX_TOKENS - 2);
        }
    }
}
