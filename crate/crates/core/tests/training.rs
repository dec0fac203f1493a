mod common;

use std::fs;

use goelan::checkpoint::Checkpoint;
use goelan::config::{Precision, RunConfig};
use goelan::data::{Dataset, DatasetManifest, Split};
use goelan::network::{Model, ModelConfig};
use goelan::train::{evaluate_checkpoint, evaluate_model, read_metrics, train, Trainer};
use goelan::Error;

fn short_run() -> RunConfig {
    let mut run = RunConfig::toy(64);
    run.train.epochs = 6;
    run.train.batch = 4;
    run.train.precision = Precision::F64;
    run
}

fn column(path: &std::path::Path, name: &str) -> Vec<f64> {
    read_metrics(path)
        .unwrap()
        .iter()
        .map(|r| r.iter().find(|(k, _)| k == name).unwrap().1.parse().unwrap())
        .collect()
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = common::fixture(dir.path());
    let manifest = DatasetManifest::load(&data).unwrap();

    let full = dir.path().join("full");
    let summary = train::<f64>(short_run(), &manifest, &full, None).unwrap();
    assert_eq!(summary.state.step, 12);
    assert_eq!(summary.history.len(), 6);

    let split = dir.path().join("split");
    let mut first = short_run();
    first.train.max_steps = Some(6);
    let s = train::<f64>(first, &manifest, &split, None).unwrap();
    assert_eq!((s.state.epoch, s.state.step), (3, 6));
    let resumed = train::<f64>(short_run(), &manifest, &split, Some(&split.join("checkpoints/last.ckpt"))).unwrap();
    assert_eq!((resumed.state.epoch, resumed.state.step), (6, 12));

    for f in ["metrics.csv", "schedule.csv"] {
        assert_eq!(fs::read_to_string(full.join(f)).unwrap(), fs::read_to_string(split.join(f)).unwrap(), "{f}");
    }
    let a = fs::read(full.join("checkpoints/last.ckpt")).unwrap();
    let b = fs::read(split.join("checkpoints/last.ckpt")).unwrap();
    assert!(a == b, "final checkpoints differ");

    // training makes progress on the fixture
    let total = column(&full.join("metrics.csv"), "total_loss");
    assert!(total[5] < total[0], "{total:?}");
    // best never regresses
    let best = Checkpoint::<f64>::load(&full.join("checkpoints/best.ckpt")).unwrap();
    let maps = column(&full.join("metrics.csv"), "val_mAP50");
    let top = maps.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(best.state.unwrap().best_map50, Some(top));
    for f in ["config-echo.toml", "pr_curve.csv", "confusion_matrix.csv"] {
        assert!(full.join(f).is_file(), "{f}");
    }
    let header = fs::read_to_string(full.join("metrics.csv")).unwrap();
    assert!(header.starts_with("epoch,lr,momentum,box_loss,cls_loss,dfl_loss,val_mAP50,val_mAP50_95"));
}

#[test]
fn evaluation_is_stable_across_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = common::fixture(dir.path());
    let manifest = DatasetManifest::load(&data).unwrap();
    let mut run = short_run();
    run.train.epochs = 2;
    let mut trainer = Trainer::<f64>::new(run.clone(), &manifest, &dir.path().join("run"), None).unwrap();
    trainer.fit().unwrap();
    let samples = Dataset::open(&manifest, Split::Val).unwrap().load_all().unwrap();
    let before = evaluate_model(&trainer.model, samples, &run).unwrap();
    let path = dir.path().join("run/checkpoints/last.ckpt");
    let after = evaluate_checkpoint::<f64>(&path, &manifest, Split::Val, &run).unwrap();
    assert_eq!(before, after);
    let again = evaluate_checkpoint::<f64>(&path, &manifest, Split::Val, &run).unwrap();
    assert_eq!(after, again);
}

#[test]
fn random_weights_score_near_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = common::fixture(dir.path());
    let manifest = DatasetManifest::load(&data).unwrap();
    let ck = Checkpoint {
        model: Model::<f32>::build(ModelConfig::toy(3, 64)).unwrap(),
        class_names: manifest.names.clone(),
        state: None,
        momentum: Vec::new(),
    };
    let path = dir.path().join("random.ckpt");
    ck.save(&path).unwrap();
    let r = evaluate_checkpoint::<f32>(&path, &manifest, Split::Train, &RunConfig::toy(64)).unwrap();
    assert!(r.map50 < 0.05, "{}", r.map50);
}

#[test]
fn class_count_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = common::fixture(dir.path());
    let manifest = DatasetManifest::load(&data).unwrap();
    let ck = Checkpoint {
        model: Model::<f32>::build(ModelConfig::toy(5, 64)).unwrap(),
        class_names: Vec::new(),
        state: None,
        momentum: Vec::new(),
    };
    let path = dir.path().join("five.ckpt");
    ck.save(&path).unwrap();
    let err = evaluate_checkpoint::<f32>(&path, &manifest, Split::Val, &RunConfig::toy(64)).unwrap_err();
    assert!(matches!(err, Error::Config { .. }), "{err}");
    assert!(err.is_user_error());
}

#[test]
fn missing_files_are_listed_at_startup() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = common::fixture(dir.path());
    fs::remove_file(dir.path().join("labels/train/001.txt")).unwrap();
    fs::remove_file(dir.path().join("labels/train/003.txt")).unwrap();
    let manifest = DatasetManifest::load(&data).unwrap();
    match Trainer::<f32>::new(RunConfig::toy(64), &manifest, &dir.path().join("run"), None) {
        Err(Error::MissingFiles(files)) => assert_eq!(files.len(), 2),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training started without labels"),
    }
}
