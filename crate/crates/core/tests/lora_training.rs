use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sketchloop_core::dataset::{synth_fixture, synth_fixture_sized};
use sketchloop_core::lora::count_params;
use sketchloop_core::trainer::{self, run_ablation, train_with_validation};
use sketchloop_core::*;

fn small_config() -> EncoderConfig {
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

fn fixture() -> (Vec<SketchPair>, Vec<SketchPair>) {
    (synth_fixture(3, 4, 1).unwrap(), synth_fixture_sized(3, 9, 2).unwrap())
}

fn model() -> EncoderModel {
    let (train, val) = fixture();
    let tok = Tokenizer::build(train.iter().chain(&val).map(|p| p.description.as_str()), 512);
    EncoderModel::new(small_config(), tok, 4).unwrap()
}

fn embeddings(m: &EncoderModel, pairs: &[SketchPair]) -> Vec<f32> {
    let (t, i) = trainer::embed_pairs(m, pairs).unwrap();
    t.data().iter().chain(i.data()).copied().collect()
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn fresh_adapters_change_no_output() {
    let (pairs, _) = fixture();
    let base = model();
    for targets in LoraTargets::ALL {
        let mut adapted = base.clone();
        adapted.inject_lora(&LoraConfig::with_targets(targets), 9).unwrap();
        let d = max_diff(&embeddings(&base, &pairs), &embeddings(&adapted, &pairs));
        assert!(d <= 1e-6, "{targets:?}: {d}");
    }
}

#[test]
fn merge_and_unmerge_preserve_outputs() {
    let (pairs, _) = fixture();
    let mut m = model();
    m.inject_lora(&LoraConfig::default(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let b_keys: Vec<String> = m.params().iter().map(|(n, _)| n.to_string()).filter(|n| n.ends_with(".lora_b")).collect();
    for k in b_keys {
        let shape = m.params().get(&k).shape().to_vec();
        *m.params_mut().get_mut(&k).unwrap() = Tensor::randn(&shape, 0.05, &mut rng);
    }
    let before = embeddings(&m, &pairs);
    let unmerged_params = m.params().clone();

    let adapters = m.merge_lora().unwrap();
    assert!(!m.has_adapters());
    let merged = embeddings(&m, &pairs);
    assert!(max_diff(&before, &merged) <= 1e-5);

    m.unmerge_lora(&adapters).unwrap();
    let restored = embeddings(&m, &pairs);
    assert!(max_diff(&before, &restored) <= 1e-5);
    for (name, p) in unmerged_params.iter() {
        let d = max_diff(p.value.data(), m.params().get(name).data());
        assert!(d <= 1e-5, "{name} drifted by {d}");
    }
}

#[test]
fn lora_training_leaves_base_weights_bit_identical() {
    let (train, val) = fixture();
    let base = model();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        learning_rate: 1e-2,
        seed: 2,
        ..TrainConfig::default()
    };
    let mut injected = base.clone();
    injected.inject_lora(&cfg.lora, cfg.seed).unwrap();
    let fingerprint = injected.params().frozen_fingerprint();

    let trained = train_with_validation(injected, &train, &val, &cfg).unwrap().model;
    assert_eq!(trained.params().frozen_fingerprint(), fingerprint);
    let mut adapters = 0;
    for (name, p) in trained.params().iter() {
        // The logit scale is the loss temperature; embeddings never read it.
        if name == trained.logit_scale_key() {
            continue;
        }
        if name.ends_with(".lora_a") || name.ends_with(".lora_b") {
            adapters += 1;
            continue;
        }
        let original = base.params().get(name);
        let same = original.data().iter().zip(p.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "{name} changed during adapter training");
    }
    assert!(adapters > 0);
}

#[test]
fn training_is_deterministic_under_a_seed() {
    let (train, val) = fixture();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 11,
        ..TrainConfig::default()
    };
    let a = train_with_validation(model(), &train, &val, &cfg).unwrap();
    let b = train_with_validation(model(), &train, &val, &cfg).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model.params(), b.model.params());
}

#[test]
fn ablation_parameter_counts_add_up() {
    let (train, val) = fixture();
    let base = model();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let report = run_ablation(&base, &train, &val, &cfg).unwrap();
    let p = |t| report.row(t).unwrap().params;
    assert_eq!(p(LoraTargets::Both), p(LoraTargets::SelfAttention) + p(LoraTargets::CrossAttention));
    assert_eq!(p(LoraTargets::Both), count_params(&base, &LoraConfig::with_targets(LoraTargets::Both)));
    assert_eq!(report.logs.len(), 3);
    assert_eq!(report.to_table().lines().count(), 4);
}
