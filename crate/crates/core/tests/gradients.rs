use std::time::Instant;

use sketchloop_core::gradcheck::{self, standard_suite, ParamCheck, MAX_PARAMS};

#[test]
fn layer_suite_passes_quickly_and_covers_every_layer_type() {
    let start = Instant::now();
    let suite = standard_suite(3).unwrap();
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "suite took {elapsed:?}");

    let names: Vec<&str> = suite.iter().map(|e| e.fragment).collect();
    for required in [
        "linear",
        "lora_linear",
        "layer_norm",
        "gelu",
        "mlp",
        "self_attention",
        "cross_attention",
        "lora_attention",
        "self_block",
        "cross_block",
        "text_tower",
        "image_tower",
    ] {
        assert!(names.contains(&required), "missing fragment {required}");
    }
    for entry in &suite {
        assert!(entry.num_params < MAX_PARAMS);
        assert!(entry.report.checked() > 0, "{} checked nothing", entry.fragment);
        assert!(entry.report.passed(), "{}:\n{}", entry.fragment, entry.report);
        if !entry.composite {
            assert_eq!(entry.eps, gradcheck::DEFAULT_EPS);
            assert!(entry.report.max_rel_error() < 1e-3);
        }
    }
}

#[test]
fn adapter_fragments_check_only_adapter_tensors() {
    let suite = standard_suite(5).unwrap();
    let lora = suite.iter().find(|e| e.fragment == "lora_attention").unwrap();
    for p in &lora.report.params {
        let is_adapter = p.name.ends_with(".lora_a") || p.name.ends_with(".lora_b");
        match p.check {
            ParamCheck::SkippedFrozen => assert!(!is_adapter, "{} skipped", p.name),
            ParamCheck::Checked { .. } => assert!(is_adapter, "{} checked", p.name),
        }
    }
}
