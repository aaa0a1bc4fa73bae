use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sketchloop_core::metrics::{perceptual_distance, reports_from_records, reports_to_records, ssim};
use sketchloop_core::*;

fn extractor() -> EncoderModel {
    let cfg = EncoderConfig {
        model_dim: 16,
        embed_dim: 8,
        num_heads: 2,
        text_blocks: 1,
        image_blocks: 2,
        fusion_blocks: 1,
        mlp_hidden: 32,
        image_size: 64,
        patch_size: 16,
        fusion_queries: 2,
        conditioning_dim: 8,
    };
    EncoderModel::new(cfg, Tokenizer::build(["a sketch"], 64), 3).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng) -> GrayImage {
    let base: u8 = rng.gen();
    let spread: u8 = rng.gen_range(1..=255);
    GrayImage::from_fn(64, 64, |_, _| base.wrapping_add(rng.gen_range(0..spread)))
}

#[test]
fn perceptual_distance_is_a_pseudometric_on_random_pairs() {
    let model = extractor();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let a = random_image(&mut rng);
        let b = random_image(&mut rng);
        let ab = perceptual_distance(&a, &b, &model).unwrap();
        let ba = perceptual_distance(&b, &a, &model).unwrap();
        assert!(ab >= 0.0 && ab.is_finite());
        assert_eq!(ab, ba);
        assert_eq!(perceptual_distance(&a, &a, &model).unwrap(), 0.0);
        let s = ssim(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&s));
    }
}

#[test]
fn report_files_round_trip_including_infinite_psnr() {
    let model = extractor();
    let img = GrayImage::filled(64, 64, 90);
    let other = GrayImage::filled(64, 64, 91);
    let same = MetricValues::compute(&img, &img, 0.5, &model).unwrap();
    let diff = MetricValues::compute(&img, &other, -0.25, &model).unwrap();
    assert!(same.psnr.is_infinite());
    let mut report = MetricReport::new(ReferenceKind::PreviousIteration);
    report.push(&same);
    report.push(&diff);
    let text = reports_to_records(&[report.clone()]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.tsv");
    std::fs::write(&path, &text).unwrap();
    let back = reports_from_records(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back, vec![report]);
}
