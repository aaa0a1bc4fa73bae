use sketchloop_core::dataset::{load_manifest, synth_fixture, write_dataset, FIXTURE_SIZE};
use sketchloop_core::Error;

#[test]
fn written_datasets_load_back_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = synth_fixture(3, 2, 4).unwrap();
    let manifest = write_dataset(dir.path(), &pairs).unwrap();
    let loaded = load_manifest(&manifest, FIXTURE_SIZE).unwrap();
    assert_eq!(loaded, pairs);
}

#[test]
fn bad_records_are_reported_together() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = synth_fixture(2, 1, 4).unwrap();
    write_dataset(dir.path(), &pairs).unwrap();
    std::fs::write(dir.path().join("junk.pgm"), b"not an image").unwrap();
    let manifest = dir.path().join("bad.jsonl");
    std::fs::write(
        &manifest,
        [
            r#"{"id":"c0_000","image_path":"c0_000.pgm","description":"fine"}"#,
            r#"{"id":"c0_000","image_path":"c0_000.pgm","description":"again"}"#,
            r#"{"id":"x","image_path":"missing.pgm","description":"gone"}"#,
            r#"{"id":"y","image_path":"junk.pgm","description":"junk"}"#,
            r#"{"id":"z","image_path":"c1_000.pgm","description":"  "}"#,
        ]
        .join("\n"),
    )
    .unwrap();
    match load_manifest(&manifest, FIXTURE_SIZE) {
        Err(Error::Ingest(errs)) => {
            let lines: Vec<usize> = errs.iter().map(|e| e.line).collect();
            assert_eq!(lines, vec![2, 3, 4, 5]);
            assert!(errs[0].message.contains("duplicate"));
            assert!(errs[3].message.contains("description"));
        }
        other => panic!("expected ingest errors, got {other:?}"),
    }
}

#[test]
fn images_are_resized_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), &synth_fixture(2, 1, 9).unwrap()).unwrap();
    for p in load_manifest(&manifest, 32).unwrap() {
        assert_eq!((p.image.width(), p.image.height()), (32, 32));
    }
}
