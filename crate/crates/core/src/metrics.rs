//! Detection metrics: matching, AP/mAP, precision/recall/F1, confusion matrix.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, GroundTruthObject};
use crate::postprocess::{detection_order, Detection};

/// Ground-truth box in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BBox,
    pub class_id: usize,
}

impl GtBox {
    pub fn from_object(o: &GroundTruthObject, width: f64, height: f64) -> Self {
        Self {
            bbox: o.to_pixels(width, height),
            class_id: o.class_id,
        }
    }
}

/// Greedy matching result. Detections are listed in descending score order.
#[derive(Clone, Debug, PartialEq)]
pub struct Matches {
    pub detections: Vec<Detection>,
    /// Matched ground-truth index for each detection.
    pub matched: Vec<Option<usize>>,
    pub gt_count: usize,
}

impl Matches {
    pub fn tp(&self) -> usize {
        self.matched.iter().filter(|m| m.is_some()).count()
    }

    pub fn fp(&self) -> usize {
        self.matched.len() - self.tp()
    }

    pub fn fn_count(&self) -> usize {
        self.gt_count - self.tp()
    }
}

/// Each detection, in descending score order, takes the unmatched
/// same-class ground truth with the highest IoU >= `iou_thresh`
/// (lowest index on ties).
pub fn match_detections(dets: &[Detection], gts: &[GtBox], iou_thresh: f64) -> Matches {
    let mut detections = dets.to_vec();
    detections.sort_by(detection_order);
    let mut taken = vec![false; gts.len()];
    let matched = detections
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || g.class_id != d.class_id {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            best.map(|(j, _)| {
                taken[j] = true;
                j
            })
        })
        .collect();
    Matches {
        detections,
        matched,
        gt_count: gts.len(),
    }
}

/// Precision/recall points of a ranked list of hits.
pub fn pr_points(ranked: &[(f64, bool)], gt_count: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    ranked
        .iter()
        .enumerate()
        .map(|(i, &(_, hit))| {
            tp += usize::from(hit);
            (tp as f64 / gt_count as f64, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// All-points interpolated AP of `(score, is_tp)` pairs. `None` when there
/// are no ground truths. Ties in score keep their input order.
pub fn average_precision(scored: &[(f64, bool)], gt_count: usize) -> Option<f64> {
    if gt_count == 0 {
        return None;
    }
    let mut ranked = scored.to_vec();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let pts = pr_points(&ranked, gt_count);
    let mut env: Vec<f64> = pts.iter().map(|p| p.1).collect();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (&(r, _), p) in pts.iter().zip(env) {
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    Some(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub class_count: usize,
    /// Detections at or above this score count toward precision, recall and
    /// the confusion matrix.
    pub conf_thresh: f64,
    /// IoU used for precision/recall and the confusion matrix.
    pub iou_thresh: f64,
    pub normalize_confusion: bool,
}

impl EvalConfig {
    pub fn new(class_count: usize) -> Self {
        Self {
            class_count,
            conf_thresh: 0.25,
            iou_thresh: 0.5,
            normalize_confusion: false,
        }
    }
}

/// `(C + 1) x (C + 1)` counts; rows are predicted class, columns true class,
/// index `C` is background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_count: usize,
    pub cells: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    fn zeros(class_count: usize) -> Self {
        Self {
            class_count,
            cells: vec![vec![0.0; class_count + 1]; class_count + 1],
        }
    }

    pub fn background(&self) -> usize {
        self.class_count
    }

    pub fn column_sums(&self) -> Vec<f64> {
        (0..=self.class_count).map(|c| self.cells.iter().map(|r| r[c]).sum()).collect()
    }

    /// Each column divided by its sum; empty columns stay zero.
    pub fn normalized(&self) -> Self {
        let sums = self.column_sums();
        let mut out = self.clone();
        for row in &mut out.cells {
            for (v, s) in row.iter_mut().zip(&sums) {
                if *s > 0.0 {
                    *v /= s;
                }
            }
        }
        out
    }

    pub fn to_csv(&self, names: &[String]) -> String {
        let label = |i: usize| {
            if i == self.class_count {
                "background".to_string()
            } else {
                names.get(i).cloned().unwrap_or_else(|| i.to_string())
            }
        };
        let mut s = String::from("predicted\\true");
        for c in 0..=self.class_count {
            s.push(',');
            s.push_str(&label(c));
        }
        s.push('\n');
        for (r, row) in self.cells.iter().enumerate() {
            s.push_str(&label(r));
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Confusion matrix over detections scoring at least `conf_thresh`.
/// Detection/ground-truth pairs with IoU >= `iou_thresh` are matched one to
/// one in descending IoU order regardless of class.
pub fn confusion_matrix(
    dets: &[Vec<Detection>],
    gts: &[Vec<GtBox>],
    class_count: usize,
    conf_thresh: f64,
    iou_thresh: f64,
) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::zeros(class_count);
    let bg = class_count;
    for (d, g) in dets.iter().zip(gts) {
        let mut d: Vec<Detection> = d.iter().filter(|x| x.score >= conf_thresh).copied().collect();
        d.sort_by(detection_order);
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (i, di) in d.iter().enumerate() {
            for (j, gj) in g.iter().enumerate() {
                let v = iou(&di.bbox, &gj.bbox);
                if v >= iou_thresh {
                    pairs.push((v, i, j));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut det_used = vec![false; d.len()];
        let mut gt_used = vec![false; g.len()];
        for (_, i, j) in pairs {
            if det_used[i] || gt_used[j] {
                continue;
            }
            det_used[i] = true;
            gt_used[j] = true;
            m.cells[d[i].class_id][g[j].class_id] += 1.0;
        }
        for (j, gj) in g.iter().enumerate() {
            if !gt_used[j] {
                m.cells[bg][gj.class_id] += 1.0;
            }
        }
        for (i, di) in d.iter().enumerate() {
            if !det_used[i] {
                m.cells[di.class_id][bg] += 1.0;
            }
        }
    }
    m
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_count: usize,
    pub thresholds: Vec<f64>,
    /// `ap[class][threshold]`, `None` for classes without ground truth.
    pub ap: Vec<Vec<Option<f64>>>,
    pub map50: f64,
    pub map50_95: f64,
    /// AP at the single IoU threshold 0.95.
    pub map95: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub gt_counts: Vec<usize>,
    pub excluded_classes: Vec<usize>,
    pub confusion: ConfusionMatrix,
    /// Per class `(recall, precision)` points at IoU 0.5.
    pub pr_curves: Vec<Vec<(f64, f64)>>,
}

pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r <= 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Evaluate per-image detections (after NMS) against per-image ground truth.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], cfg: &EvalConfig) -> Result<EvalReport> {
    if dets.is_empty() || gts.is_empty() {
        return Err(Error::EmptyDataset("no images to evaluate".into()));
    }
    if dets.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    let c = cfg.class_count;
    if let Some(bad) = dets
        .iter()
        .flatten()
        .map(|d| d.class_id)
        .chain(gts.iter().flatten().map(|g| g.class_id))
        .find(|&k| k >= c)
    {
        return Err(Error::Contract(format!("class id {bad} outside {c} classes")));
    }
    let thresholds = coco_thresholds();
    let mut gt_counts = vec![0usize; c];
    for g in gts.iter().flatten() {
        gt_counts[g.class_id] += 1;
    }

    // per threshold, per class: (score, hit) over all images
    let per_threshold: Vec<Vec<Vec<(f64, bool)>>> = thresholds
        .par_iter()
        .map(|&t| {
            let mut by_class = vec![Vec::new(); c];
            for (d, g) in dets.iter().zip(gts) {
                let m = match_detections(d, g, t);
                for (det, hit) in m.detections.iter().zip(&m.matched) {
                    by_class[det.class_id].push((det.score, hit.is_some()));
                }
            }
            by_class
        })
        .collect();
    let ap: Vec<Vec<Option<f64>>> = (0..c)
        .map(|k| {
            per_threshold
                .iter()
                .map(|by_class| average_precision(&by_class[k], gt_counts[k]))
                .collect()
        })
        .collect();
    let excluded_classes: Vec<usize> = (0..c).filter(|&k| gt_counts[k] == 0).collect();
    let map_at = |ti: usize| mean(ap.iter().filter_map(|a| a[ti]));
    let map50 = map_at(0);
    let map95 = map_at(thresholds.len() - 1);
    let map50_95 = mean((0..thresholds.len()).map(map_at));

    let pr_curves = (0..c)
        .map(|k| {
            if gt_counts[k] == 0 {
                return Vec::new();
            }
            let mut ranked = per_threshold[0][k].clone();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
            pr_points(&ranked, gt_counts[k])
        })
        .collect();

    let mut tp = vec![0usize; c];
    let mut n_det = vec![0usize; c];
    for (d, g) in dets.iter().zip(gts) {
        let d: Vec<Detection> = d.iter().filter(|x| x.score >= cfg.conf_thresh).copied().collect();
        let m = match_detections(&d, g, cfg.iou_thresh);
        for (det, hit) in m.detections.iter().zip(&m.matched) {
            n_det[det.class_id] += 1;
            tp[det.class_id] += usize::from(hit.is_some());
        }
    }
    let per_class_precision: Vec<f64> = (0..c)
        .map(|k| if n_det[k] == 0 { 0.0 } else { tp[k] as f64 / n_det[k] as f64 })
        .collect();
    let per_class_recall: Vec<f64> = (0..c)
        .map(|k| if gt_counts[k] == 0 { 0.0 } else { tp[k] as f64 / gt_counts[k] as f64 })
        .collect();
    let present = || (0..c).filter(|&k| gt_counts[k] > 0);
    let precision = mean(present().map(|k| per_class_precision[k]));
    let recall = mean(present().map(|k| per_class_recall[k]));
    let mut confusion = confusion_matrix(dets, gts, c, cfg.conf_thresh, cfg.iou_thresh);
    if cfg.normalize_confusion {
        confusion = confusion.normalized();
    }
    Ok(EvalReport {
        class_count: c,
        thresholds,
        ap,
        map50,
        map50_95,
        map95,
        precision,
        recall,
        f1: f1_score(precision, recall),
        per_class_precision,
        per_class_recall,
        gt_counts,
        excluded_classes,
        confusion,
        pr_curves,
    })
}

impl EvalReport {
    /// Flat `key: value` text.
    pub fn to_kv(&self, names: &[String]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mAP50: {:.6}", self.map50);
        let _ = writeln!(s, "mAP50_95: {:.6}", self.map50_95);
        let _ = writeln!(s, "mAP95: {:.6}", self.map95);
        let _ = writeln!(s, "precision: {:.6}", self.precision);
        let _ = writeln!(s, "recall: {:.6}", self.recall);
        let _ = writeln!(s, "f1: {:.6}", self.f1);
        for k in 0..self.class_count {
            let name = names.get(k).cloned().unwrap_or_else(|| k.to_string());
            match self.ap[k][0] {
                Some(v) => {
                    let _ = writeln!(s, "AP50.{name}: {v:.6}");
                }
                None => {
                    let _ = writeln!(s, "AP50.{name}: excluded (no instances)");
                }
            }
        }
        s
    }

    pub fn pr_curve_csv(&self, names: &[String]) -> String {
        let mut s = String::from("class,recall,precision\n");
        for (k, pts) in self.pr_curves.iter().enumerate() {
            let name = names.get(k).cloned().unwrap_or_else(|| k.to_string());
            for (r, p) in pts {
                let _ = writeln!(s, "{name},{r:.6},{p:.6}");
            }
        }
        s
    }
}
