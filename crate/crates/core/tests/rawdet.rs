use std::fs;

use segmil_core::bagbuild::{build_bagpack, read_rawdet, write_rawdet, BuildConfig, RawDetectionRecord, RawImageRecord};
use segmil_core::bagio::{read_bagpack, DatasetManifest, Split};
use segmil_core::mask::BinaryMask;
use segmil_core::ErrorClass;

fn manifest() -> DatasetManifest {
    DatasetManifest {
        num_classes: 3,
        embed_dim: 2,
        num_concepts: 3,
        concept_names: vec!["a".into(), "b".into(), "c".into()],
        split: Split::Val,
    }
}

fn record(id: &str, n_dets: usize) -> RawImageRecord {
    let (h, w) = (12, 12);
    RawImageRecord {
        image_id: id.into(),
        label: 2,
        group_id: None,
        height: h,
        width: w,
        image_similarities: vec![0.5, 0.3, 0.2],
        image_embedding: vec![0.0, 1.0],
        detections: (0..n_dets)
            .map(|k| {
                let mask = BinaryMask::from_fn(h, w, |r, c| r / 4 == k && c < 4 + k);
                RawDetectionRecord {
                    concept_id: k % 3,
                    bbox: mask.bounding_box().unwrap(),
                    score: 0.5,
                    mask: mask.to_rle(),
                    embedding: vec![k as f64, 1.0],
                    clip_scores: vec![0.2, 0.3, 0.5],
                }
            })
            .collect(),
    }
}

fn cfg() -> BuildConfig {
    BuildConfig { k_top: 3, tau_minpix: 4, ..Default::default() }
}

#[test]
fn rawdet_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("raw.jsonl");
    let records = vec![record("x", 3), record("y", 0)];
    write_rawdet(&manifest(), &records, &path).unwrap();
    let (m, back) = read_rawdet(&path).unwrap();
    assert_eq!(m, manifest());
    assert_eq!(back, records);
}

#[test]
fn rawdet_to_bagpack() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.jsonl");
    let out = dir.path().join("bags.jsonl");
    write_rawdet(&manifest(), &[record("x", 3), record("y", 0)], &raw).unwrap();
    let stats = build_bagpack(&raw, &out, &cfg()).unwrap();
    assert_eq!(stats.len(), 2);
    assert_eq!(stats[0].detections, 3);
    assert_eq!(stats[0].instances, 3);
    assert!(stats[1].fallback);

    let (m, bags) = read_bagpack(&out).unwrap();
    assert_eq!(m, manifest());
    assert_eq!(bags[0].len(), 3);
    // largest segment first
    let areas: Vec<u64> = bags[0].instances.iter().map(|i| i.mask_area.unwrap()).collect();
    assert!(areas.windows(2).all(|w| w[0] >= w[1]), "{areas:?}");
    assert_eq!(bags[1].instances[0].embedding, vec![0.0, 1.0]);
}

#[test]
fn bad_rawdet_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.jsonl");
    let out = dir.path().join("bags.jsonl");
    let mut r = record("x", 1);
    r.detections[0].embedding.push(9.0);
    write_rawdet(&manifest(), &[r], &raw).unwrap();
    let err = build_bagpack(&raw, &out, &cfg()).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Schema);

    let text = fs::read_to_string(&raw).unwrap();
    fs::write(&raw, text.replace("\"image_id\"", "\"imageid\"")).unwrap();
    let err = build_bagpack(&raw, &out, &cfg()).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Schema);
}
