//! Run configuration file (TOML with `[model]`, `[train]`, `[augment]` and
//! `[eval]` sections). Every field has a default, so an empty file is valid.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::network::{LossConfig, ModelConfig, WidthPreset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: WidthPreset,
    pub input_size: usize,
    pub aux: bool,
    pub label_smoothing: f64,
    pub reg_weight: f64,
    pub nms_iou: f64,
    pub conf_thresh: f64,
    pub init_seed: u64,
    pub loss: LossConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::full(1);
        Self {
            preset: m.width_preset,
            input_size: m.input_size,
            aux: m.aux_enabled,
            label_smoothing: m.label_smoothing,
            reg_weight: m.reg_weight,
            nms_iou: m.nms_iou,
            conf_thresh: m.conf_thresh,
            init_seed: m.init_seed,
            loss: m.loss,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Use `model.reg_weight` as the decay coefficient instead of `weight_decay`.
    pub weight_decay_from_model: bool,
    pub warmup_epochs: f64,
    pub warmup_momentum: f64,
    pub seed: u64,
    pub workers: usize,
    pub precision: Precision,
    /// Stop after this many optimizer steps. The schedule still spans all
    /// epochs, and the interrupted epoch is evaluated and logged.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 8,
            lr0: 0.01,
            lr_final: 0.01,
            momentum: 0.937,
            weight_decay: 0.0005,
            weight_decay_from_model: false,
            warmup_epochs: 3.0,
            warmup_momentum: 0.8,
            seed: 0,
            workers: 1,
            precision: Precision::F32,
            max_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Score floor for detections entering AP computation.
    pub conf: f64,
    /// IoU for precision/recall and the confusion matrix.
    pub iou: f64,
    pub batch: usize,
    pub normalize_confusion: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            conf: 0.001,
            iou: 0.5,
            batch: 8,
            normalize_confusion: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Small-width settings for quick CPU runs.
    pub fn toy(input_size: usize) -> Self {
        let mut c = Self::default();
        c.model.preset = WidthPreset::Toy;
        c.model.input_size = input_size;
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config("config", format!("{origin}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let bad = |m: &str| Err(Error::config("train", m));
        if t.batch == 0 || t.epochs == 0 {
            return bad("epochs and batch must be at least 1");
        }
        if !(t.lr0 >= 0.0 && t.lr_final >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if !(0.0..1.0).contains(&t.momentum) || !(0.0..1.0).contains(&t.warmup_momentum) {
            return bad("momentum values must lie in [0, 1)");
        }
        if t.weight_decay < 0.0 || t.warmup_epochs < 0.0 {
            return bad("weight_decay and warmup_epochs must be non-negative");
        }
        if self.eval.batch == 0 || !(0.0..=1.0).contains(&self.eval.conf) || !(self.eval.iou > 0.0 && self.eval.iou <= 1.0) {
            return Err(Error::config("eval", "need batch >= 1, conf in [0, 1], iou in (0, 1]"));
        }
        self.augment.validate()?;
        self.model_config(1)?;
        Ok(())
    }

    /// Architecture record for a dataset with `class_count` classes.
    pub fn model_config(&self, class_count: usize) -> Result<ModelConfig> {
        let m = &self.model;
        let mut cfg = ModelConfig::preset(m.preset, class_count, m.input_size);
        cfg.aux_enabled = m.aux;
        cfg.label_smoothing = m.label_smoothing;
        cfg.reg_weight = m.reg_weight;
        cfg.nms_iou = m.nms_iou;
        cfg.conf_thresh = m.conf_thresh;
        cfg.init_seed = m.init_seed;
        cfg.loss = m.loss.clone();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn effective_weight_decay(&self) -> f64 {
        if self.train.weight_decay_from_model {
            self.model.reg_weight
        } else {
            self.train.weight_decay
        }
    }
}
