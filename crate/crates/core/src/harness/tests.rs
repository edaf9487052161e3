use super::*;
use crate::hessian::{CurvatureConfig, PowerConfig};
use crate::nn::Partition;
use crate::optim::OptimizerConfig;
use crate::pacbayes::BoundConfig;

fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 3];
    for d in [n, rows, cols] {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 1];
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

#[test]
fn idx_fixture_round_trips() {
    let pixels: Vec<u8> = (0..4 * 6).map(|i| (i * 11) as u8).collect();
    let x = parse_idx_images(&idx_images(4, 2, 3, &pixels)).unwrap();
    assert_eq!(x.shape(), &[4, 6]);
    for (v, p) in x.data().iter().zip(&pixels) {
        assert_eq!(*v, *p as f64 / 255.0);
    }
    assert_eq!(parse_idx_labels(&idx_labels(&[3, 0, 9, 1]), 10).unwrap(), vec![3, 0, 9, 1]);
}

#[test]
fn idx_errors_carry_offsets() {
    match parse_idx_images(&[]) {
        Err(Error::Data { offset: 0, .. }) => {}
        other => panic!("{other:?}"),
    }
    let mut bad = idx_images(1, 1, 1, &[0]);
    bad[3] = 1;
    assert!(matches!(parse_idx_images(&bad), Err(Error::Data { offset: 0, .. })));
    assert!(matches!(parse_idx_images(&idx_images(2, 2, 2, &[0; 5])), Err(Error::Data { offset: 21, .. })));
    assert!(matches!(parse_idx_labels(&idx_labels(&[1, 12]), 10), Err(Error::Data { offset: 9, .. })));
    assert!(matches!(parse_idx_labels(&idx_labels(&[1])[..7], 10), Err(Error::Data { offset: 4, .. })));
}

#[test]
fn blobs_are_reproducible_and_balanced() {
    let spec = BlobSpec { classes: 3, per_class: 50, test_per_class: 10, dim: 4, ..Default::default() };
    let a = make_blobs(&spec).unwrap();
    assert_eq!(a, make_blobs(&spec).unwrap());
    assert_eq!(a.m(), 150);
    assert_eq!(a.train.partition(), Partition::Train);
    assert_eq!(a.test.partition(), Partition::Test);
    for c in 0..3 {
        assert_eq!(a.train.labels().iter().filter(|&&y| y == c).count(), 50);
    }
    let other = make_blobs(&BlobSpec { seed: 1, ..spec.clone() }).unwrap();
    assert_ne!(a.train, other.train);
}

#[test]
fn label_noise_contract() {
    let spec = BlobSpec { classes: 4, per_class: 25, test_per_class: 5, ..Default::default() };
    let d = make_blobs(&spec).unwrap();
    let (same, none) = inject_label_noise(&d, 0.0, 1).unwrap();
    assert!(none.is_empty());
    assert_eq!(same.train, d.train);
    let (noisy, flipped) = inject_label_noise(&d, 0.5, 1).unwrap();
    assert_eq!(flipped.len(), 50);
    let changed: Vec<usize> = (0..100).filter(|&i| noisy.train.labels()[i] != d.train.labels()[i]).collect();
    assert_eq!(changed, flipped);
    assert_eq!(noisy.test, d.test);
    assert_eq!(inject_label_noise(&d, 0.5, 1).unwrap().1, flipped);
    assert_ne!(inject_label_noise(&d, 0.5, 2).unwrap().1, flipped);
    assert!(inject_label_noise(&d, 1.0, 1).is_err());
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    assert!(ExperimentConfig::from_json("{}").is_ok());
    let err = ExperimentConfig::from_json(r#"{"optimiser": {}}"#).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(ExperimentConfig::from_json(r#"{"optimizer": {"lr": 0.1, "lr_typo": 1}}"#).is_err());
    assert!(ExperimentConfig::from_json(r#"{"label_noise": 1.0}"#).is_err());
    assert!(ExperimentConfig::from_json(r#"{"seeds": []}"#).is_err());
    let c = ExperimentConfig::from_json(r#"{"data": {"blobs": {"classes": 3}}, "seeds": [4, 5]}"#).unwrap();
    assert_eq!(c.seeds, vec![4, 5]);
    let back = ExperimentConfig::from_json(&c.resolved_json().unwrap()).unwrap();
    assert_eq!(back, c);
    let schema = ExperimentConfig::schema_json();
    assert!(schema.contains("\"additionalProperties\": false"));
    assert!(schema.contains("learning_rates"));
}

#[test]
fn quantiles_interpolate() {
    use crate::imp::{TicketArtifact, TicketKind};
    use crate::masking::{PruningMask, Scope};
    use crate::nn::{Layout, ParamVector, SegmentKind};
    use std::sync::Arc;
    let l = Arc::new(Layout::packed([("w", vec![5], SegmentKind::Weight)]).unwrap());
    let t = TicketArtifact {
        kind: TicketKind::Imp,
        init: ParamVector::new(l.clone(), vec![0.0; 5]).unwrap(),
        trained: ParamVector::new(l, vec![-4.0, 1.0, 0.0, 2.0, -3.0]).unwrap(),
        mask: PruningMask::from_parts(vec![true, true, false, true, true], vec![true; 5]).unwrap(),
        rewind_step: 0,
        seed: 0,
        config: serde_json::Value::Null,
        rounds: vec![],
    };
    let q = param_quantiles(&t, &[0.0, 0.5, 1.0, 1.0 / 3.0], Scope::Prunable);
    assert_eq!(q[0].weight, 1.0);
    assert_eq!(q[1].weight, 2.5);
    assert_eq!(q[2].weight, 4.0);
    assert!((q[3].weight - 2.0).abs() < 1e-12);
    assert_eq!(q[1].shift, q[1].weight);
}

#[test]
fn records_round_trip_and_drop_non_finite() {
    let r = Record::new("j", 3, "ev").round(2).label("family", "spike_slab").metric("a", 1.5).metric("nan", f64::NAN);
    assert!(!r.metrics.contains_key("nan"));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("log.jsonl");
    save_jsonl(&p, &[r.clone(), r.clone()]).unwrap();
    assert_eq!(read_jsonl(&p).unwrap(), vec![r.clone(), r]);
    std::fs::write(&p, "{\"schema_version\":1}\n").unwrap();
    assert!(matches!(read_jsonl(&p), Err(Error::Data { offset: 0, .. })));
    assert!(Record::json_schema().contains("metrics"));
}

pub(crate) fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig { hidden: vec![6], ..Default::default() },
        data: DataConfig::Blobs(BlobSpec { classes: 2, per_class: 20, test_per_class: 10, dim: 2, ..Default::default() }),
        optimizer: OptimizerConfig { lr: 0.05, epochs: 3, batch_size: 8, ..Default::default() },
        imp: PruneSettings { rounds: Some(1), ..Default::default() },
        bound: BoundConfig { steps: 3, final_samples: 8, mc_samples: 2, ..Default::default() },
        hessian: CurvatureConfig {
            power: PowerConfig { max_iters: 10, tol: 1e-4 },
            trace_samples: 4,
            slice_radius: 0.5,
            slice_points: 5,
        },
        seeds: vec![0, 1],
        sweep: SweepConfig {
            learning_rates: vec![0.01, 0.1],
            reg_lambdas: vec![0.0, 1e-3],
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn recipes_write_complete_run_directories() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    for name in [RecipeName::LrSweep, RecipeName::RegularizerSweep, RecipeName::Flatness, RecipeName::ParamDist] {
        let out = dir.path().join(name.as_str());
        let s = run_recipe(&cfg, name, &out, 2).unwrap();
        for f in [CONFIG_FILE, RUNLOG_FILE, MANIFEST_FILE] {
            assert!(out.join(f).exists(), "{f}");
        }
        for f in &s.manifest.files {
            assert_eq!(digest_file(&out, &f.path).unwrap().sha256, f.sha256);
        }
        assert_eq!(read_jsonl(&out.join(RUNLOG_FILE)).unwrap(), s.records);
        let tables = report(&out, &out.join("tables")).unwrap();
        assert!(!tables.is_empty());
    }
    let lr = read_jsonl(&dir.path().join("lr_sweep").join(RUNLOG_FILE)).unwrap();
    assert_eq!(lr.iter().filter(|r| r.event == "ticket").count(), 2 * 2 * 2);
    assert_eq!(lr.iter().filter(|r| r.event == "bound").count(), 2 * 2 * 2 * 2);
    let fl = read_jsonl(&dir.path().join("flatness").join(RUNLOG_FILE)).unwrap();
    assert_eq!(fl.iter().filter(|r| r.event == "curvature").count(), 2 * 3);
    assert!(dir.path().join("flatness/artifacts/seed0/slice_sam.csv").exists());
    assert!(run_recipe(&cfg, RecipeName::ParamDist, &dir.path().join("param_dist"), 1).is_err());
}

#[test]
fn job_count_does_not_change_logs() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let a = run_recipe(&cfg, RecipeName::ParamDist, &dir.path().join("a"), 1).unwrap();
    let b = run_recipe(&cfg, RecipeName::ParamDist, &dir.path().join("b"), 3).unwrap();
    let read = |s: &RunSummary| std::fs::read(s.dir.join(RUNLOG_FILE)).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(a.manifest.files, b.manifest.files);
}

#[test]
fn single_run_commands() {
    let mut cfg = tiny_config();
    cfg.seeds = vec![2];
    cfg.cs.bound = true;
    let dir = tempfile::tempdir().unwrap();
    cmd_train(&cfg, &dir.path().join("train"), 1).unwrap();
    let imp = cmd_imp(&cfg, &dir.path().join("imp"), 1).unwrap();
    assert!(imp.records.iter().any(|r| r.event == "ticket"));
    let cs = cmd_cs(&cfg, &dir.path().join("cs"), 1).unwrap();
    assert!(cs.records.iter().any(|r| r.event == "bound"));
    let ticket = dir.path().join("imp/artifacts/seed2/ticket");
    let b = cmd_bound(&cfg, &ticket, &dir.path().join("bound")).unwrap();
    assert_eq!(b.records.iter().filter(|r| r.event == "bound").count(), 2);
    cmd_hessian(&cfg, &ticket, &dir.path().join("hessian")).unwrap();
    cmd_slice(&cfg, &ticket, &dir.path().join("slice")).unwrap();
    assert!(dir.path().join("slice/artifacts/slice/slice.csv").exists());
    let mut wide = cfg.clone();
    wide.model.hidden = vec![7];
    assert!(cmd_bound(&wide, &ticket, &dir.path().join("bound2")).is_err());
}
