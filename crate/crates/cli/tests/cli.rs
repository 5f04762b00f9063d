use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use segmil_core::bagbuild::{write_rawdet, RawDetectionRecord, RawImageRecord};
use segmil_core::bagio::{read_bagpack, DatasetManifest, Split};
use segmil_core::mask::BinaryMask;
use segmil_core::metrics::EvalReport;

fn segmil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segmil"))
        .args(args)
        .env_remove("SEGMILCBM_WORKERS")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_synth(dir: &Path) -> PathBuf {
    let out = dir.join("synth");
    let o = segmil(&[
        "gen-synth",
        "--out-dir",
        p(&out),
        "--set",
        "synth.n_train=80",
        "--set",
        "synth.n_test=40",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn help_lists_config_keys_with_defaults() {
    let o = segmil(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    for line in [
        "build.max_instances = 15",
        "build.rho_max = 0.5",
        "build.tau_iou = 0.5",
        "train.lambda_concept = 0.1",
        "train.lr = 0.0001",
        "train.model.temperature = 1.0",
        "train.model.hidden = 128",
        "train.epochs = 50",
        "bench.seeds = [0,1,2]",
    ] {
        assert!(text.contains(line), "help lacks {line:?}");
    }
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let ck = dir.path().join("m.ckpt");
    let log = dir.path().join("log.csv");

    // usage error
    assert_eq!(segmil(&["train", "--bogus"]).status.code(), Some(2));
    // missing input
    let o = segmil(&["train", "--bags", p(&missing), "--checkpoint", p(&ck), "--log", p(&log)]);
    assert_eq!(o.status.code(), Some(3));
    // config errors
    let o = segmil(&["--set", "train.nonsense=1", "gen-synth", "--out-dir", p(dir.path())]);
    assert_eq!(o.status.code(), Some(4));
    let o = segmil(&["--set", "build.rho_max=0", "gen-synth", "--out-dir", p(dir.path())]);
    assert_eq!(o.status.code(), Some(4));
    let bad_cfg = dir.path().join("bad.json");
    fs::write(&bad_cfg, r#"{"train": {"lr": -1}}"#).unwrap();
    let o = segmil(&["--config", p(&bad_cfg), "gen-synth", "--out-dir", p(dir.path())]);
    assert_eq!(o.status.code(), Some(4));
    // malformed bagpack
    let junk = dir.path().join("junk.jsonl");
    fs::write(&junk, "{not json\n").unwrap();
    let o = segmil(&["train", "--bags", p(&junk), "--checkpoint", p(&ck), "--log", p(&log)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_eval_pipeline_and_worst_group_requirement() {
    let dir = tempfile::tempdir().unwrap();
    let synth = small_synth(dir.path());
    let ck = dir.path().join("m.ckpt");
    let log = dir.path().join("log.csv");
    let o = segmil(&[
        "train",
        "--bags",
        p(&synth.join("train.jsonl")),
        "--checkpoint",
        p(&ck),
        "--log",
        p(&log),
        "--set",
        "train.epochs=3",
        "--set",
        "train.lr=0.01",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log_text = fs::read_to_string(&log).unwrap();
    assert_eq!(log_text.lines().count(), 4);
    assert!(log_text.starts_with("epoch,loss_cls,loss_concept,loss_total,train_acc,wall_ms"));

    let report = dir.path().join("eval.json");
    let explain = dir.path().join("explain.jsonl");
    let o = segmil(&[
        "eval",
        "--checkpoint",
        p(&ck),
        "--data",
        p(&synth.join("test.jsonl")),
        "--worst-group",
        "--explain",
        p(&explain),
        "--out",
        p(&report),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rep: EvalReport = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep.n, 40);
    assert_eq!(rep.per_group_acc.len(), 4);
    assert!(rep.worst_group_acc.unwrap() <= rep.avg_acc);
    assert_eq!(fs::read_to_string(&explain).unwrap().lines().count(), 40);

    // the training split carries no group ids
    let o = segmil(&["eval", "--checkpoint", p(&ck), "--data", p(&synth.join("train.jsonl")), "--worst-group"]);
    assert_eq!(o.status.code(), Some(2));

    let suite = dir.path().join("suite");
    let o = segmil(&[
        "corrupt",
        "--data",
        p(&synth.join("test.jsonl")),
        "--out-dir",
        p(&suite),
        "--kinds",
        "gauss_noise",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = dir.path().join("suite.csv");
    let o = segmil(&[
        "eval",
        "--checkpoint",
        p(&ck),
        "--suite",
        p(&suite.join("suite.json")),
        "--data",
        p(&synth.join("test.jsonl")),
        "--csv",
        p(&csv),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // header plus five severities
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 6);

    let o = segmil(&["corrupt", "--data", p(&synth.join("test.jsonl")), "--out-dir", p(&suite), "--kinds", "fog"]);
    assert_eq!(o.status.code(), Some(4));
}

fn fake_report(avg: f64, g0: f64, g1: f64) -> EvalReport {
    EvalReport {
        n: 20,
        avg_acc: avg,
        per_group_acc: BTreeMap::from([(0, g0), (1, g1)]),
        n_per_group: BTreeMap::from([(0, 10), (1, 10)]),
        worst_group_acc: Some(g0.min(g1)),
    }
}

#[test]
fn report_matches_closed_form_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let runs = [fake_report(0.80, 0.9, 0.7), fake_report(0.85, 0.95, 0.75), fake_report(0.75, 0.8, 0.7)];
    let mut paths = Vec::new();
    for (i, r) in runs.iter().enumerate() {
        let path = dir.path().join(format!("seed{i}.json"));
        fs::write(&path, serde_json::to_string(r).unwrap()).unwrap();
        paths.push(path);
    }
    let out = dir.path().join("agg.csv");
    let mut args = vec!["report", "--out", p(&out)];
    args.extend(paths.iter().map(|x| p(x)));
    let o = segmil(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let closed = |v: [f64; 3]| {
        let m = v.iter().sum::<f64>() / 3.0;
        let s = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 2.0).sqrt();
        (m, s, 1.96 * s / 3f64.sqrt())
    };
    let expected = [
        ("avg_acc", closed([0.80, 0.85, 0.75])),
        ("worst_group_acc", closed([0.7, 0.75, 0.7])),
        ("group_0_acc", closed([0.9, 0.95, 0.8])),
        ("group_1_acc", closed([0.7, 0.75, 0.7])),
    ];
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("metric,n,mean,std,ci95"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), expected.len());
    for (row, (name, (m, s, ci))) in rows.iter().zip(expected) {
        assert_eq!(row[0], name);
        assert_eq!(row[1], "3");
        let f = |k: usize| row[k].parse::<f64>().unwrap();
        assert!((f(2) - m).abs() < 1e-12 && (f(3) - s).abs() < 1e-12 && (f(4) - ci).abs() < 1e-12, "{row:?}");
    }
}

fn rect(h: usize, w: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |r, c| (r0..r1).contains(&r) && (c0..c1).contains(&c))
}

fn det(concept_id: usize, mask: BinaryMask, fill: f64) -> RawDetectionRecord {
    RawDetectionRecord {
        concept_id,
        bbox: mask.bounding_box().unwrap(),
        score: 0.9,
        mask: mask.to_rle(),
        embedding: vec![fill, -fill, 1.0],
        clip_scores: vec![0.1, 0.2, 0.3, 0.4],
    }
}

#[test]
fn build_bags_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = DatasetManifest {
        num_classes: 2,
        embed_dim: 3,
        num_concepts: 4,
        concept_names: ["wing", "beak", "water", "sky"].map(String::from).to_vec(),
        split: Split::Train,
    };
    let (h, w) = (20, 20);
    let records = vec![
        RawImageRecord {
            image_id: "img0".into(),
            label: 1,
            group_id: Some(3),
            height: h,
            width: w,
            image_similarities: vec![0.4, 0.3, 0.2, 0.1],
            image_embedding: vec![0.0, 0.0, 1.0],
            detections: vec![
                // two heavily overlapping masks merge; the third stays apart
                det(0, rect(h, w, 0, 8, 0, 8), 1.0),
                det(1, rect(h, w, 0, 8, 1, 8), 2.0),
                det(2, rect(h, w, 12, 16, 12, 16), 3.0),
                // too small
                det(3, rect(h, w, 18, 19, 0, 2), 4.0),
            ],
        },
        RawImageRecord {
            image_id: "img1".into(),
            label: 0,
            group_id: Some(0),
            height: h,
            width: w,
            image_similarities: vec![0.1, 0.2, 0.3, 0.4],
            image_embedding: vec![5.0, 5.0, 5.0],
            detections: vec![],
        },
    ];
    let raw = dir.path().join("raw.jsonl");
    write_rawdet(&manifest, &records, &raw).unwrap();
    let bags = dir.path().join("bags.jsonl");
    let o = segmil(&[
        "build-bags",
        "--rawdet",
        p(&raw),
        "--out",
        p(&bags),
        "--set",
        "build.k_top=4",
        "--set",
        "build.tau_minpix=10",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let (m, out) = read_bagpack(&bags).unwrap();
    assert_eq!(m, manifest);
    assert_eq!(out.len(), 2);
    assert_eq!(out[0].image_id, "img0");
    assert_eq!((out[0].label, out[0].group_id), (1, Some(3)));
    assert_eq!(out[0].len(), 2);
    // the merged component keeps its largest member's embedding
    assert_eq!(out[0].instances[0].embedding, vec![1.0, -1.0, 1.0]);
    assert_eq!(out[0].instances[0].concept_ids, vec![0, 1]);
    assert_eq!(out[0].instances[1].concept_ids, vec![2]);
    // no detections: a single whole-image instance
    assert_eq!(out[1].len(), 1);
    assert_eq!(out[1].instances[0].embedding, vec![5.0, 5.0, 5.0]);

    // default k_top exceeds C
    let o = segmil(&["build-bags", "--rawdet", p(&raw), "--out", p(&bags)]);
    assert_eq!(o.status.code(), Some(4));
}
