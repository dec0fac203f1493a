#![allow(dead_code)]

use std::path::{Path, PathBuf};

use goelan::config::RunConfig;
use goelan::data::{generate_synthetic, AugmentConfig, SyntheticSpec};

/// Synthetic rectangles under `dir`; returns `(data.yaml, smoke.yaml)`.
/// The smoke manifest validates on the training images.
pub fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let data = generate_synthetic(dir, &SyntheticSpec::default()).unwrap();
    let smoke = dir.join("smoke.yaml");
    std::fs::write(&smoke, "train: images/train\nval: images/train\nnames: red, green, blue\n").unwrap();
    (data, smoke)
}

/// Toy model, 64 px input, 500 full-batch steps without augmentation.
pub fn smoke_config() -> RunConfig {
    let mut run = RunConfig::toy(64);
    run.augment = AugmentConfig::disabled();
    run.train.epochs = 500;
    run.train.batch = 8;
    run.train.lr0 = 0.02;
    run.train.lr_final = 0.002;
    run.model.loss.obj_weight = 10.0;
    run
}
