//! SGD training loop, per-epoch validation, checkpoints and run logs.
//!
//! A run directory holds `config-echo.toml`, `metrics.csv` (one row per
//! epoch), `schedule.csv` (one row per optimizer step), `pr_curve.csv`,
//! `confusion_matrix.csv` and `checkpoints/{last,best}.ckpt`.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::Rgb32FImage;
use ndarray::{Array4, ArrayD, s};

use crate::checkpoint::{Checkpoint, TrainState};
use crate::config::{RunConfig, TrainConfig};
use crate::data::{image_to_tensor, AugmentConfig, Dataset, DatasetManifest, Pipeline, Sample, Split};
use crate::error::{Error, Result};
use crate::geometry::GroundTruthObject;
use crate::graph::Mode;
use crate::loss::{assign_batch, total_loss, LossBreakdown, ScaleShape};
use crate::metrics::{evaluate, EvalConfig, EvalReport, GtBox};
use crate::network::{Model, RawPrediction};
use crate::postprocess::{postprocess, Detection};
use crate::scalar::Scalar;

/// Learning rate and momentum at optimizer step `step`.
///
/// Both ramp linearly during the first `warmup_epochs` epochs (lr from 0 to
/// `lr0`, momentum from `warmup_momentum` to `momentum`); afterwards the
/// rate moves linearly from `lr0` to `lr_final` over the remaining steps.
pub fn schedule(step: usize, steps_per_epoch: usize, total_steps: usize, cfg: &TrainConfig) -> (f64, f64) {
    let warm = cfg.warmup_epochs * steps_per_epoch as f64;
    let t = step as f64;
    if t < warm {
        let f = t / warm;
        return (cfg.lr0 * f, cfg.warmup_momentum + (cfg.momentum - cfg.warmup_momentum) * f);
    }
    let rest = total_steps as f64 - warm;
    let f = if rest > 0.0 { ((t - warm) / rest).min(1.0) } else { 1.0 };
    (cfg.lr0 + (cfg.lr_final - cfg.lr0) * f, cfg.momentum)
}

/// One SGD step with momentum (dampening 0) and L2 decay on convolution
/// kernels: `v = mu v + g + wd w`, `w -= lr v`.
pub fn sgd_step<T: Scalar>(
    model: &mut Model<T>,
    grads: &[Option<ArrayD<T>>],
    momentum: &mut [ArrayD<T>],
    lr: f64,
    mu: f64,
    weight_decay: f64,
) {
    let (lr, mu, wd) = (T::of(lr), T::of(mu), T::of(weight_decay));
    for ((p, g), v) in model.store_mut().params_mut().iter_mut().zip(grads).zip(momentum.iter_mut()) {
        let Some(g) = g else { continue };
        let decay = p.kind.decays();
        ndarray::Zip::from(&mut p.value).and(v).and(g).for_each(|w, v, &g| {
            let g = if decay { g + wd * *w } else { g };
            *v = mu * *v + g;
            *w -= lr * *v;
        });
    }
}

fn zero_momentum<T: Scalar>(model: &Model<T>) -> Vec<ArrayD<T>> {
    model.store().params().iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect()
}

/// Loss means over one epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossMeans {
    pub box_loss: f64,
    pub cls_loss: f64,
    pub obj_loss: f64,
    pub dfl_loss: Option<f64>,
    pub aux_loss: f64,
    pub total: f64,
    batches: usize,
}

impl LossMeans {
    fn add(&mut self, b: &LossBreakdown) {
        self.box_loss += b.box_loss;
        self.cls_loss += b.class_loss;
        self.obj_loss += b.obj_loss;
        self.dfl_loss = b.dfl_loss.map(|d| self.dfl_loss.unwrap_or(0.0) + d);
        self.aux_loss += b.aux_loss;
        self.total += b.total;
        self.batches += 1;
    }

    fn finish(mut self) -> Self {
        let n = self.batches.max(1) as f64;
        self.box_loss /= n;
        self.cls_loss /= n;
        self.obj_loss /= n;
        self.dfl_loss = self.dfl_loss.map(|d| d / n);
        self.aux_loss /= n;
        self.total /= n;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Schedule values of the last step of the epoch.
    pub lr: f64,
    pub momentum: f64,
    pub train: LossMeans,
    pub val: LossMeans,
    pub val_map50: f64,
    pub val_map50_95: f64,
    pub val_map95: f64,
    pub val_precision: f64,
    pub val_recall: f64,
    pub val_f1: f64,
}

const METRICS_HEADER: &str = "epoch,lr,momentum,box_loss,cls_loss,dfl_loss,val_mAP50,val_mAP50_95,\
obj_loss,aux_loss,total_loss,val_box_loss,val_cls_loss,val_dfl_loss,val_obj_loss,val_mAP95,val_precision,val_recall,val_f1";

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.8}")).unwrap_or_default()
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let (t, v) = (&self.train, &self.val);
        format!(
            "{},{:.8},{:.6},{:.8},{:.8},{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{},{:.8},{:.8},{:.8},{:.8},{:.8}",
            self.epoch,
            self.lr,
            self.momentum,
            t.box_loss,
            t.cls_loss,
            opt(t.dfl_loss),
            self.val_map50,
            self.val_map50_95,
            t.obj_loss,
            t.aux_loss,
            t.total,
            v.box_loss,
            v.cls_loss,
            opt(v.dfl_loss),
            v.obj_loss,
            self.val_map95,
            self.val_precision,
            self.val_recall,
            self.val_f1
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub state: TrainState,
    pub history: Vec<EpochRecord>,
    pub last_report: Option<EvalReport>,
}

/// Ground truth in input-pixel coordinates.
fn gt_boxes(targets: &[Vec<GroundTruthObject>], input_size: usize) -> Vec<Vec<GtBox>> {
    let s = input_size as f64;
    targets.iter().map(|ts| ts.iter().map(|o| GtBox::from_object(o, s, s)).collect()).collect()
}

/// Inference and losses over a fixed (unaugmented) split.
struct Validator {
    pipeline: Pipeline,
    eval: EvalConfig,
    conf: f64,
}

impl Validator {
    fn run<T: Scalar>(&self, model: &Model<T>) -> Result<(LossMeans, EvalReport)> {
        let cfg = model.config();
        let scales = ScaleShape::for_input(cfg.input_size);
        let mut means = LossMeans::default();
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for batch in self.pipeline.epoch::<T>(0) {
            let batch = batch?;
            let pass = model.forward_graph(batch.images, Mode::Eval, false)?;
            let main = pass.main_prediction(cfg);
            let targets = assign_batch(&batch.targets, &scales, cfg.input_size, cfg.class_count, cfg.label_smoothing)?;
            let empty = RawPrediction::empty(cfg.class_count, cfg.dfl_bins());
            means.add(&total_loss(&main, &empty, &targets, cfg)?.breakdown);
            dets.extend(postprocess(&main, self.conf, cfg.nms_iou, cfg.input_size));
            gts.extend(gt_boxes(&batch.targets, cfg.input_size));
        }
        Ok((means.finish(), evaluate(&dets, &gts, &self.eval)?))
    }
}

fn eval_config(run: &RunConfig, model_conf: f64, class_count: usize) -> EvalConfig {
    EvalConfig {
        class_count,
        conf_thresh: model_conf,
        iou_thresh: run.eval.iou,
        normalize_confusion: run.eval.normalize_confusion,
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Drop rows at or past `keep_until` from a log with a leading numeric
/// column, so a resumed run continues the file cleanly.
fn truncate_log(path: &Path, header: &str, keep_until: usize) -> Result<()> {
    let old = fs::read_to_string(path).unwrap_or_default();
    let mut text = format!("{header}\n");
    for line in old.lines().skip(1) {
        match line.split(',').next().and_then(|k| k.parse::<usize>().ok()) {
            Some(k) if k < keep_until => {
                text.push_str(line);
                text.push('\n');
            }
            _ => {}
        }
    }
    write_file(path, &text)
}

const SCHEDULE_HEADER: &str = "step,epoch,lr,momentum";

pub struct Trainer<T: Scalar> {
    pub run: RunConfig,
    pub model: Model<T>,
    momentum: Vec<ArrayD<T>>,
    pub state: TrainState,
    names: Vec<String>,
    pipeline: Pipeline,
    validator: Validator,
    run_dir: PathBuf,
}

impl<T: Scalar> Trainer<T> {
    /// Prepare a run: load data, build or restore the model, create the run
    /// directory and echo the effective configuration.
    pub fn new(run: RunConfig, manifest: &DatasetManifest, run_dir: &Path, resume: Option<&Path>) -> Result<Self> {
        run.validate()?;
        let train_set = Dataset::open(manifest, Split::Train)?;
        let val_set = Dataset::open(manifest, Split::Val)?;
        let class_count = manifest.class_count();
        let model_cfg = run.model_config(class_count)?;
        let (model, momentum, state) = match resume {
            Some(path) => {
                let ck = Checkpoint::<T>::load(path)?;
                if ck.model.config().class_count != class_count {
                    return Err(Error::config(
                        "train",
                        format!(
                            "checkpoint has {} classes, dataset has {class_count}",
                            ck.model.config().class_count
                        ),
                    ));
                }
                let state = ck.state.clone().ok_or_else(|| Error::Checkpoint {
                    path: path.display().to_string(),
                    message: "no training state to resume from".into(),
                })?;
                let momentum = if ck.momentum.is_empty() { zero_momentum(&ck.model) } else { ck.momentum };
                (ck.model, momentum, state)
            }
            None => {
                let model = Model::<T>::build(model_cfg)?;
                let momentum = zero_momentum(&model);
                let state = TrainState {
                    seed: run.train.seed,
                    ..TrainState::default()
                };
                (model, momentum, state)
            }
        };
        let input = model.config().input_size;
        let started = Instant::now();
        let train_samples = train_set.load_all()?;
        let val_samples = val_set.load_all()?;
        log::info!(
            "loaded {} train and {} val images in {:.1} s",
            train_samples.len(),
            val_samples.len(),
            started.elapsed().as_secs_f64()
        );
        let t = &run.train;
        let pipeline = Pipeline::new(train_samples, Split::Train, input, t.batch, run.augment.clone(), state.seed, t.workers)?
            .with_total_epochs(t.epochs);
        let validator = Validator {
            pipeline: Pipeline::new(val_samples, Split::Val, input, run.eval.batch, AugmentConfig::disabled(), 0, t.workers)?,
            eval: eval_config(&run, model.config().conf_thresh, class_count),
            conf: run.eval.conf,
        };
        fs::create_dir_all(run_dir.join("checkpoints")).map_err(|e| Error::io(run_dir, e))?;
        write_file(&run_dir.join("config-echo.toml"), &run.to_toml())?;
        log::info!(
            "recipe: lr0 {} lr_final {} momentum {} weight_decay {} warmup_epochs {} warmup_momentum {}",
            t.lr0,
            t.lr_final,
            t.momentum,
            run.effective_weight_decay(),
            t.warmup_epochs,
            t.warmup_momentum
        );
        truncate_log(&run_dir.join("metrics.csv"), METRICS_HEADER, state.epoch)?;
        truncate_log(&run_dir.join("schedule.csv"), SCHEDULE_HEADER, state.step)?;
        Ok(Self {
            run,
            model,
            momentum,
            state,
            names: manifest.names.clone(),
            pipeline,
            validator,
            run_dir: run_dir.to_path_buf(),
        })
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.pipeline.batches_per_epoch()
    }

    /// Schedule length; `max_steps` only cuts the run short.
    fn total_steps(&self) -> usize {
        self.run.train.epochs * self.steps_per_epoch()
    }

    /// Forward, loss, backward and one optimizer update on a batch.
    pub fn step(&mut self, images: Array4<T>, targets: &[Vec<GroundTruthObject>], lr: f64, mu: f64) -> Result<LossBreakdown> {
        let cfg = self.model.config().clone();
        let scales = ScaleShape::for_input(cfg.input_size);
        let assigned = assign_batch(targets, &scales, cfg.input_size, cfg.class_count, cfg.label_smoothing)?;
        let (grads, updates, breakdown) = {
            let mut pass = self.model.forward_graph(images, Mode::Train, true)?;
            let main = pass.main_prediction(&cfg);
            let aux = if pass.aux.is_empty() {
                RawPrediction::empty(cfg.class_count, cfg.dfl_bins())
            } else {
                pass.aux_prediction(&cfg)
            };
            let out = total_loss(&main, &aux, &assigned, &cfg)?;
            let seeds = pass
                .main
                .iter()
                .copied()
                .zip(out.main_grad)
                .chain(pass.aux.iter().copied().zip(out.aux_grad))
                .collect();
            let grads = pass.tape.backward(seeds)?.into_param_grads();
            (grads, pass.tape.take_norm_updates(), out.breakdown)
        };
        let wd = self.run.effective_weight_decay();
        sgd_step(&mut self.model, &grads, &mut self.momentum, lr, mu, wd);
        self.model.store_mut().apply_norm_updates(&updates);
        self.state.step += 1;
        Ok(breakdown)
    }

    fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            class_names: self.names.clone(),
            state: Some(self.state.clone()),
            momentum: self.momentum.clone(),
        }
    }

    /// Validate the current weights without training.
    pub fn validate(&self) -> Result<(LossMeans, EvalReport)> {
        self.validator.run(&self.model)
    }

    /// Train until `epochs` or `max_steps` is reached.
    pub fn fit(&mut self) -> Result<TrainSummary> {
        let spe = self.steps_per_epoch();
        let total = self.total_steps();
        let stop = self.run.train.max_steps.map_or(total, |m| m.min(total));
        let metrics = self.run_dir.join("metrics.csv");
        let sched = self.run_dir.join("schedule.csv");
        let mut history = Vec::new();
        let mut last_report = None;
        while self.state.epoch < self.run.train.epochs && self.state.step < stop {
            let epoch = self.state.epoch;
            let started = Instant::now();
            let mut train = LossMeans::default();
            let (mut lr, mut mu) = schedule(self.state.step, spe, total, &self.run.train);
            let order = self.pipeline.order(epoch);
            for bi in 0..spe {
                if self.state.step >= stop {
                    break;
                }
                (lr, mu) = schedule(self.state.step, spe, total, &self.run.train);
                append(&sched, &format!("{},{epoch},{lr:.10},{mu:.10}", self.state.step))?;
                let batch = self.pipeline.batch::<T>(epoch, bi, &order)?;
                let b = self.step(batch.images, &batch.targets, lr, mu)?;
                log::debug!("step {} loss {:.5}", self.state.step, b.total);
                train.add(&b);
            }
            let train = train.finish();
            let (val, report) = self.validate()?;
            let rec = EpochRecord {
                epoch,
                lr,
                momentum: mu,
                train,
                val,
                val_map50: report.map50,
                val_map50_95: report.map50_95,
                val_map95: report.map95,
                val_precision: report.precision,
                val_recall: report.recall,
                val_f1: report.f1,
            };
            append(&metrics, &rec.csv_row())?;
            log::info!(
                "epoch {epoch}: loss {:.4} (box {:.4} cls {:.4} obj {:.4}) val mAP50 {:.4} mAP50-95 {:.4} [{:.1} s]",
                rec.train.total,
                rec.train.box_loss,
                rec.train.cls_loss,
                rec.train.obj_loss,
                rec.val_map50,
                rec.val_map50_95,
                started.elapsed().as_secs_f64()
            );
            self.state.epoch += 1;
            let improved = self.state.best_map50.is_none_or(|b| report.map50 > b);
            if improved {
                self.state.best_map50 = Some(report.map50);
            }
            let ck = self.checkpoint();
            ck.save(&self.run_dir.join("checkpoints/last.ckpt"))?;
            if improved {
                ck.save(&self.run_dir.join("checkpoints/best.ckpt"))?;
            }
            write_file(&self.run_dir.join("pr_curve.csv"), &report.pr_curve_csv(&self.names))?;
            write_file(&self.run_dir.join("confusion_matrix.csv"), &report.confusion.to_csv(&self.names))?;
            history.push(rec);
            last_report = Some(report);
        }
        Ok(TrainSummary {
            run_dir: self.run_dir.clone(),
            state: self.state.clone(),
            history,
            last_report,
        })
    }
}

/// Run a whole training job at the configured precision parameter `T`.
pub fn train<T: Scalar>(run: RunConfig, manifest: &DatasetManifest, run_dir: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    Trainer::<T>::new(run, manifest, run_dir, resume)?.fit()
}

/// Detections for images already resized to the model input, in input
/// pixels.
pub fn predict<T: Scalar>(model: &Model<T>, images: &[&Rgb32FImage], conf: f64, nms_iou: f64) -> Result<Vec<Vec<Detection>>> {
    let s = model.config().input_size;
    let mut batch = Array4::<T>::zeros((images.len(), 3, s, s));
    for (i, img) in images.iter().enumerate() {
        if img.dimensions() != (s as u32, s as u32) {
            return Err(Error::Shape(format!("image is {:?}, model expects {s}x{s}", img.dimensions())));
        }
        batch.slice_mut(s![i..i + 1, .., .., ..]).assign(&image_to_tensor::<T>(img));
    }
    let raw = model.forward_infer(&batch)?;
    Ok(postprocess(&raw, conf, nms_iou, s))
}

/// Evaluate a model on a list of samples. The auxiliary branch is removed
/// first.
pub fn evaluate_model<T: Scalar>(model: &Model<T>, samples: Vec<Sample>, run: &RunConfig) -> Result<EvalReport> {
    let model = if model.has_aux() { model.strip_auxiliary()? } else { model.clone() };
    let cfg = model.config();
    let validator = Validator {
        pipeline: Pipeline::new(samples, Split::Val, cfg.input_size, run.eval.batch, AugmentConfig::disabled(), 0, run.train.workers)?,
        eval: eval_config(run, cfg.conf_thresh, cfg.class_count),
        conf: run.eval.conf,
    };
    Ok(validator.run(&model)?.1)
}

/// Load a checkpoint and evaluate it on one split of a dataset.
pub fn evaluate_checkpoint<T: Scalar>(path: &Path, manifest: &DatasetManifest, split: Split, run: &RunConfig) -> Result<EvalReport> {
    let ck = Checkpoint::<T>::load(path)?;
    let (have, want) = (ck.model.config().class_count, manifest.class_count());
    if have != want {
        return Err(Error::config(
            "eval",
            format!("checkpoint has {have} classes but the dataset lists {want}"),
        ));
    }
    let samples = Dataset::open(manifest, split)?.load_all()?;
    evaluate_model(&ck.model, samples, run)
}

/// Per-epoch `metrics.csv` rows parsed back into columns.
pub fn read_metrics(path: &Path) -> Result<Vec<Vec<(String, String)>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    Ok(lines
        .map(|l| header.iter().zip(l.split(',')).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        .collect())
}

/// One-line summary of a report.
pub fn report_line(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "mAP50 {:.4} mAP50-95 {:.4} mAP95 {:.4} P {:.4} R {:.4} F1 {:.4}",
        r.map50, r.map50_95, r.map95, r.precision, r.recall, r.f1
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    #[test]
    fn warmup_endpoints() {
        let cfg = TrainConfig::default();
        let spe = 10;
        let total = 200;
        assert_eq!(schedule(0, spe, total, &cfg), (0.0, 0.8));
        let (lr, mu) = schedule(15, spe, total, &cfg);
        assert!((lr - 0.005).abs() < 1e-15 && (mu - 0.8685).abs() < 1e-12);
        let (lr, mu) = schedule(30, spe, total, &cfg);
        assert!((lr - 0.01).abs() < 1e-15 && (mu - 0.937).abs() < 1e-15);
        assert_eq!(schedule(199, spe, total, &cfg), (0.01, 0.937));
    }

    #[test]
    fn decay_reaches_final_rate() {
        let cfg = TrainConfig {
            lr_final: 0.001,
            warmup_epochs: 0.0,
            ..TrainConfig::default()
        };
        assert_eq!(schedule(0, 5, 100, &cfg).0, 0.01);
        assert!((schedule(50, 5, 100, &cfg).0 - 0.0055).abs() < 1e-12);
        assert!((schedule(100, 5, 100, &cfg).0 - 0.001).abs() < 1e-12);
    }

    #[test]
    fn sgd_matches_hand_update() {
        let mut model = Model::<f64>::build(crate::network::ModelConfig::toy(1, 64)).unwrap();
        let before: Vec<ArrayD<f64>> = model.store().params().iter().map(|p| p.value.clone()).collect();
        let grads: Vec<Option<ArrayD<f64>>> = before.iter().map(|w| Some(w.mapv(|_| 1.0))).collect();
        let mut mom = zero_momentum(&model);
        sgd_step(&mut model, &grads, &mut mom, 0.1, 0.9, 0.5);
        sgd_step(&mut model, &grads, &mut mom, 0.1, 0.9, 0.0);
        for ((p, w0), m) in model.store().params().iter().zip(&before).zip(&mom) {
            let (x0, x, v) = (w0.iter().next().unwrap(), p.value.iter().next().unwrap(), m.iter().next().unwrap());
            let (v1, w1) = if p.kind == ParamKind::ConvWeight {
                let v1 = 1.0 + 0.5 * x0;
                (v1, x0 - 0.1 * v1)
            } else {
                (1.0, x0 - 0.1)
            };
            let v2 = 0.9 * v1 + 1.0;
            assert!((v - v2).abs() < 1e-12);
            assert!((x - (w1 - 0.1 * v2)).abs() < 1e-12);
        }
    }
}
