//! Target assignment and the detection losses.
//!
//! Head channel layout per cell (see [`crate::network`]):
//! `tx ty tw th | obj | class logits (C) | distance-bin logits (4 x 16, optional)`.
//!
//! Box parameterization, shared with [`crate::postprocess`]:
//! the predicted center offset inside its cell is `sigmoid(tx)`, and the
//! predicted normalized width is `(2 sigmoid(tw))^2 * anchor(stride)` where the
//! anchor is `8 * stride` pixels. Box targets are `(x, y, w, h)` with `x, y` the
//! center offset in cell units and `w, h` normalized by the input size.

use std::collections::HashMap;

use ndarray::Array4;

use crate::error::{Error, Result};
use crate::geometry::GroundTruthObject;
use crate::network::{ModelConfig, RawPrediction, CLASS_OFFSET, HEAD_STRIDES, OBJ_CHANNEL};
use crate::scalar::Scalar;

/// Anchor side in strides.
pub const ANCHOR_STRIDES: f64 = 8.0;
/// An object is routed to the largest stride `s` with `size >= SIZE_RATIO * s`.
pub const SIZE_RATIO: f64 = 4.0;

/// Normalized anchor side of a head stride.
pub fn anchor(stride: usize, input_size: usize) -> f64 {
    ANCHOR_STRIDES * stride as f64 / input_size as f64
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleShape {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
}

impl ScaleShape {
    /// The three head grids of a square input.
    pub fn for_input(input_size: usize) -> Vec<Self> {
        HEAD_STRIDES
            .iter()
            .map(|&stride| Self {
                stride,
                h: input_size.div_ceil(stride),
                w: input_size.div_ceil(stride),
            })
            .collect()
    }
}

/// One assigned object.
#[derive(Clone, Debug, PartialEq)]
pub struct Positive {
    pub batch: usize,
    pub gy: usize,
    pub gx: usize,
    /// `(x, y, w, h)`: center offset in cell units, size normalized.
    pub target: [f64; 4],
    pub class_id: usize,
    pub class_target: Vec<f64>,
    /// Distances from the cell center to the left/top/right/bottom edges, in strides.
    pub ltrb: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleTargets {
    pub shape: ScaleShape,
    pub positives: Vec<Positive>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetMap {
    pub scales: Vec<ScaleTargets>,
    pub batch: usize,
    pub input_size: usize,
    pub class_count: usize,
    /// Objects overwritten by a later object in the same cell.
    pub collisions: usize,
    /// Objects dropped for having zero width or height.
    pub rejected: usize,
}

impl TargetMap {
    pub fn positive_count(&self) -> usize {
        self.scales.iter().map(|s| s.positives.len()).sum()
    }

    pub fn indicator(&self, scale: usize, batch: usize, gy: usize, gx: usize) -> bool {
        self.scales[scale]
            .positives
            .iter()
            .any(|p| p.batch == batch && p.gy == gy && p.gx == gx)
    }
}

/// `(1 - eps) * onehot(class_index) + eps / C`.
pub fn smooth_labels(class_index: usize, class_count: usize, eps: f64) -> Result<Vec<f64>> {
    if class_index >= class_count {
        return Err(Error::Contract(format!(
            "class index {class_index} out of range for {class_count} classes"
        )));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Contract(format!("label smoothing {eps} must lie in [0, 1)")));
    }
    let mut t = vec![eps / class_count as f64; class_count];
    t[class_index] += 1.0 - eps;
    Ok(t)
}

/// Index into `scales` of the head responsible for an object of normalized
/// size `size`.
pub fn select_scale(scales: &[ScaleShape], size: f64, input_size: usize) -> usize {
    let px = size * input_size as f64;
    let mut best: Option<usize> = None;
    for (i, s) in scales.iter().enumerate() {
        if px >= SIZE_RATIO * s.stride as f64 && best.is_none_or(|b| scales[b].stride < s.stride) {
            best = Some(i);
        }
    }
    best.unwrap_or_else(|| {
        scales
            .iter()
            .enumerate()
            .min_by_key(|(_, s)| s.stride)
            .map_or(0, |(i, _)| i)
    })
}

/// Targets for one image (batch index 0).
pub fn assign_targets(
    gts: &[GroundTruthObject],
    scales: &[ScaleShape],
    input_size: usize,
    class_count: usize,
    eps: f64,
) -> Result<TargetMap> {
    assign_batch(&[gts.to_vec()], scales, input_size, class_count, eps)
}

pub fn assign_batch(
    batch: &[Vec<GroundTruthObject>],
    scales: &[ScaleShape],
    input_size: usize,
    class_count: usize,
    eps: f64,
) -> Result<TargetMap> {
    let mut map = TargetMap {
        scales: scales
            .iter()
            .map(|&shape| ScaleTargets {
                shape,
                positives: Vec::new(),
            })
            .collect(),
        batch: batch.len(),
        input_size,
        class_count,
        collisions: 0,
        rejected: 0,
    };
    let mut slots: Vec<HashMap<(usize, usize, usize), usize>> = vec![HashMap::new(); scales.len()];
    for (b, gts) in batch.iter().enumerate() {
        for gt in gts {
            if gt.class_id >= class_count {
                return Err(Error::Contract(format!(
                    "object class {} out of range for {class_count} classes",
                    gt.class_id
                )));
            }
            if !(gt.w > 0.0 && gt.h > 0.0) {
                log::warn!("image {b}: skipping object of class {} with zero size", gt.class_id);
                map.rejected += 1;
                continue;
            }
            let si = select_scale(scales, gt.w.max(gt.h), input_size);
            let shape = scales[si];
            let fx = gt.cx.clamp(0.0, 1.0) * shape.w as f64;
            let fy = gt.cy.clamp(0.0, 1.0) * shape.h as f64;
            let gx = (fx.floor() as usize).min(shape.w - 1);
            let gy = (fy.floor() as usize).min(shape.h - 1);
            let s = shape.stride as f64;
            let size = input_size as f64;
            let (ccx, ccy) = ((gx as f64 + 0.5) * s, (gy as f64 + 0.5) * s);
            let (x1, y1, x2, y2) = gt.corners();
            let ltrb = [
                (ccx - x1 * size) / s,
                (ccy - y1 * size) / s,
                (x2 * size - ccx) / s,
                (y2 * size - ccy) / s,
            ]
            .map(|d| d.max(0.0));
            let pos = Positive {
                batch: b,
                gy,
                gx,
                target: [fx - gx as f64, fy - gy as f64, gt.w, gt.h],
                class_id: gt.class_id,
                class_target: smooth_labels(gt.class_id, class_count, eps)?,
                ltrb,
            };
            let list = &mut map.scales[si].positives;
            match slots[si].get(&(b, gy, gx)) {
                Some(&i) => {
                    list[i] = pos;
                    map.collisions += 1;
                }
                None => {
                    slots[si].insert((b, gy, gx), list.len());
                    list.push(pos);
                }
            }
        }
    }
    if map.collisions > 0 {
        log::debug!("{} target collision(s), last object kept", map.collisions);
    }
    Ok(map)
}

/// Value and gradient of one loss term with respect to the raw head outputs.
#[derive(Clone, Debug)]
pub struct Component {
    pub value: f64,
    pub grad: Vec<Array4<f64>>,
}

impl Component {
    fn zeros<T: Scalar>(pred: &RawPrediction<T>) -> Self {
        Self {
            value: 0.0,
            grad: pred.scales.iter().map(|s| Array4::zeros(s.data.raw_dim())).collect(),
        }
    }
}

fn check_aligned<T: Scalar>(pred: &RawPrediction<T>, targets: &TargetMap) -> Result<()> {
    if pred.scales.len() != targets.scales.len() {
        return Err(Error::Shape(format!(
            "{} prediction scales vs {} target scales",
            pred.scales.len(),
            targets.scales.len()
        )));
    }
    for (p, t) in pred.scales.iter().zip(&targets.scales) {
        let (b, c, h, w) = p.data.dim();
        if b != targets.batch || h != t.shape.h || w != t.shape.w || p.stride != t.shape.stride {
            return Err(Error::Shape(format!(
                "prediction (B={b}, {h}x{w}, stride {}) does not match targets (B={}, {}x{}, stride {})",
                p.stride, targets.batch, t.shape.h, t.shape.w, t.shape.stride
            )));
        }
        let need = CLASS_OFFSET + targets.class_count + 4 * pred.dfl_bins;
        if c != need {
            return Err(Error::Shape(format!("prediction has {c} channels, expected {need}")));
        }
    }
    Ok(())
}

/// `-alpha (1 - p)^gamma ln p` for the target probability mass `p`.
pub fn focal_term(p: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0);
    -alpha * (1.0 - p).powf(gamma) * p.ln()
}

fn focal_dp(p: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0);
    let q = 1.0 - p;
    let first = if gamma == 0.0 || q <= 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * p.ln() };
    alpha * (first - q.powf(gamma) / p)
}

#[derive(Clone, Debug)]
pub struct FocalOutput {
    pub component: Component,
    /// False when there were no positive cells; the loss is then 0.
    pub has_positives: bool,
}

/// Softmax focal loss over positive cells, averaged over positives.
pub fn focal_class_loss<T: Scalar>(pred: &RawPrediction<T>, targets: &TargetMap, alpha: f64, gamma: f64) -> Result<FocalOutput> {
    check_aligned(pred, targets)?;
    Ok(focal_weighted(pred, targets, alpha, gamma, &[1.0; 3]))
}

fn focal_weighted<T: Scalar>(pred: &RawPrediction<T>, targets: &TargetMap, alpha: f64, gamma: f64, weights: &[f64]) -> FocalOutput {
    let mut out = Component::zeros(pred);
    let n = targets.positive_count();
    if n == 0 {
        return FocalOutput {
            component: out,
            has_positives: false,
        };
    }
    let c = targets.class_count;
    for (si, (scale, st)) in pred.scales.iter().zip(&targets.scales).enumerate() {
        let w = weights[si] / n as f64;
        for p in &st.positives {
            let z: Vec<f64> = (0..c)
                .map(|k| scale.data[[p.batch, CLASS_OFFSET + k, p.gy, p.gx]].f64())
                .collect();
            let prob = softmax(&z);
            let ph: f64 = prob.iter().zip(&p.class_target).map(|(a, b)| a * b).sum();
            out.value += w * focal_term(ph, alpha, gamma);
            let d = w * focal_dp(ph, alpha, gamma);
            for k in 0..c {
                out.grad[si][[p.batch, CLASS_OFFSET + k, p.gy, p.gx]] += d * prob[k] * (p.class_target[k] - ph);
            }
        }
    }
    FocalOutput {
        component: out,
        has_positives: true,
    }
}

/// `lambda [(x - x')^2 + (y - y')^2 + (sqrt w - sqrt w')^2 + (sqrt h - sqrt h')^2]`
/// for one predicted and one target box in `(x, y, w, h)` form.
pub fn box_term(pred: [f64; 4], target: [f64; 4], lambda: f64) -> Result<f64> {
    if pred[2] < 0.0 || pred[3] < 0.0 {
        return Err(Error::Contract(format!(
            "negative predicted box size ({}, {})",
            pred[2], pred[3]
        )));
    }
    if target[2] < 0.0 || target[3] < 0.0 {
        return Err(Error::Contract("negative target box size".into()));
    }
    let d = [
        pred[0] - target[0],
        pred[1] - target[1],
        pred[2].sqrt() - target[2].sqrt(),
        pred[3].sqrt() - target[3].sqrt(),
    ];
    Ok(lambda * d.iter().map(|v| v * v).sum::<f64>())
}

/// Decoded `(x, y, w, h)` of one cell in target units.
pub fn decode_cell(raw: [f64; 4], stride: usize, input_size: usize) -> [f64; 4] {
    let a = anchor(stride, input_size);
    let sw = 2.0 * sigmoid(raw[2]);
    let sh = 2.0 * sigmoid(raw[3]);
    [sigmoid(raw[0]), sigmoid(raw[1]), sw * sw * a, sh * sh * a]
}

/// Inverse of [`decode_cell`]; offsets must lie in (0, 1) and sizes in (0, 4 anchor).
pub fn encode_cell(target: [f64; 4], stride: usize, input_size: usize) -> [f64; 4] {
    let a = anchor(stride, input_size);
    let logit = |p: f64| {
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        (p / (1.0 - p)).ln()
    };
    [
        logit(target[0]),
        logit(target[1]),
        logit((target[2] / a).sqrt() / 2.0),
        logit((target[3] / a).sqrt() / 2.0),
    ]
}

/// Squared-error box loss summed over positives and scales, averaged over
/// the batch.
pub fn box_loss<T: Scalar>(pred: &RawPrediction<T>, targets: &TargetMap, lambda: f64) -> Result<Component> {
    check_aligned(pred, targets)?;
    box_weighted(pred, targets, lambda, &[1.0; 3])
}

fn box_weighted<T: Scalar>(pred: &RawPrediction<T>, targets: &TargetMap, lambda: f64, weights: &[f64]) -> Result<Component> {
    let mut out = Component::zeros(pred);
    let batch = targets.batch.max(1) as f64;
    for (si, (scale, st)) in pred.scales.iter().zip(&targets.scales).enumerate() {
        let w = weights[si] / batch;
        let ra = anchor(scale.stride, targets.input_size).sqrt();
        for p in &st.positives {
            let raw: [f64; 4] = std::array::from_fn(|k| scale.data[[p.batch, k, p.gy, p.gx]].f64());
            let dec = decode_cell(raw, scale.stride, targets.input_size);
            out.value += w * box_term(dec, p.target, lambda)?;
            let s: [f64; 4] = raw.map(sigmoid);
            let g = &mut out.grad[si];
            for k in 0..2 {
                g[[p.batch, k, p.gy, p.gx]] += w * lambda * 2.0 * (s[k] - p.target[k]) * s[k] * (1.0 - s[k]);
            }
            for k in 2..4 {
                let root = 2.0 * s[k] * ra;
                g[[p.batch, k, p.gy, p.gx]] +=
                    w * lambda * 2.0 * (root - p.target[k].sqrt()) * 2.0 * ra * s[k] * (1.0 - s[k]);
            }
        }
    }
    Ok(out)
}

/// Binary cross-entropy on the objectness logit, averaged over every cell.
pub fn objectness_loss<T: Scalar>(pred: &RawPrediction<T>, targets: &TargetMap) -> Result<Component> {
    check_aligned(pred, targets)?;
    Ok(objectness_weighted(pred, targets, &[1.0; 3]))
}

fn objectness_weighted<T: Scalar>(pred: &RawPrediction<T>, targets: &TargetMap, weights: &[f64]) -> Component {
    let mut out = Component::zeros(pred);
    let cells: usize = pred.scales.iter().map(|s| s.data.dim().0 * s.data.dim().2 * s.data.dim().3).sum();
    if cells == 0 {
        return out;
    }
    for (si, (scale, st)) in pred.scales.iter().zip(&targets.scales).enumerate() {
        let w = weights[si] / cells as f64;
        let (b, _, h, wd) = scale.data.dim();
        let mut indicator = ndarray::Array3::<f64>::zeros((b, h, wd));
        for p in &st.positives {
            indicator[[p.batch, p.gy, p.gx]] = 1.0;
        }
        for ((bi, y, x), &t) in indicator.indexed_iter() {
            let z = scale.data[[bi, OBJ_CHANNEL, y, x]].f64();
            out.value += w * (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p());
            out.grad[si][[bi, OBJ_CHANNEL, y, x]] += w * (sigmoid(z) - t);
        }
    }
    out
}

/// Distribution focal loss on the optional distance bins, averaged over
/// positives and the four sides.
pub fn dfl_loss<T: Scalar>(pred: &RawPrediction<T>, targets: &TargetMap) -> Result<Component> {
    check_aligned(pred, targets)?;
    if pred.dfl_bins == 0 {
        return Err(Error::Contract("distance-bin loss requested on a model without bins".into()));
    }
    Ok(dfl_weighted(pred, targets, &[1.0; 3]))
}

fn dfl_weighted<T: Scalar>(pred: &RawPrediction<T>, targets: &TargetMap, weights: &[f64]) -> Component {
    let mut out = Component::zeros(pred);
    let n = targets.positive_count();
    let bins = pred.dfl_bins;
    if n == 0 || bins == 0 {
        return out;
    }
    let base = CLASS_OFFSET + targets.class_count;
    let top = bins as f64 - 1.0 - 1e-6;
    for (si, (scale, st)) in pred.scales.iter().zip(&targets.scales).enumerate() {
        let w = weights[si] / (4 * n) as f64;
        for p in &st.positives {
            for side in 0..4 {
                let ch = base + side * bins;
                let z: Vec<f64> = (0..bins).map(|k| scale.data[[p.batch, ch + k, p.gy, p.gx]].f64()).collect();
                let prob = softmax(&z);
                let y = p.ltrb[side].clamp(0.0, top);
                let lo = y.floor() as usize;
                let mut t = vec![0.0; bins];
                t[lo] = lo as f64 + 1.0 - y;
                t[lo + 1] = y - lo as f64;
                for k in 0..bins {
                    if t[k] > 0.0 {
                        out.value -= w * t[k] * prob[k].max(1e-300).ln();
                    }
                    out.grad[si][[p.batch, ch + k, p.gy, p.gx]] += w * (prob[k] - t[k]);
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub box_loss: f64,
    pub class_loss: f64,
    pub obj_loss: f64,
    pub dfl_loss: Option<f64>,
    /// Weighted recipe total on the auxiliary predictions.
    pub aux_loss: f64,
    pub total: f64,
    pub positives: usize,
    pub collisions: usize,
}

/// Loss values plus gradients with respect to the raw head outputs.
#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub breakdown: LossBreakdown,
    pub main_grad: Vec<Array4<T>>,
    pub aux_grad: Vec<Array4<T>>,
}

struct Recipe {
    box_loss: f64,
    class_loss: f64,
    obj_loss: f64,
    dfl_loss: Option<f64>,
    total: f64,
    grad: Vec<Array4<f64>>,
}

fn recipe<T: Scalar>(pred: &RawPrediction<T>, targets: &TargetMap, cfg: &ModelConfig, weights: &[f64]) -> Result<Recipe> {
    check_aligned(pred, targets)?;
    let l = &cfg.loss;
    let bx = box_weighted(pred, targets, l.lambda_coord, weights)?;
    let cl = focal_weighted(pred, targets, l.focal_alpha, l.focal_gamma, weights).component;
    let ob = objectness_weighted(pred, targets, weights);
    let df = (l.dfl && pred.dfl_bins > 0).then(|| dfl_weighted(pred, targets, weights));
    let mut parts = vec![(l.box_weight, &bx), (l.cls_weight, &cl), (l.obj_weight, &ob)];
    if let Some(d) = &df {
        parts.push((l.dfl_weight, d));
    }
    let mut grad = Component::zeros(pred).grad;
    let mut total = 0.0;
    for (w, c) in parts {
        total += w * c.value;
        for (g, cg) in grad.iter_mut().zip(&c.grad) {
            g.scaled_add(w, cg);
        }
    }
    for (name, v) in [("box", bx.value), ("class", cl.value), ("objectness", ob.value)]
        .into_iter()
        .chain(df.as_ref().map(|d| ("dfl", d.value)))
    {
        if !v.is_finite() {
            return Err(Error::NonFinite { component: name.into() });
        }
    }
    Ok(Recipe {
        box_loss: bx.value,
        class_loss: cl.value,
        obj_loss: ob.value,
        dfl_loss: df.map(|d| d.value),
        total,
        grad,
    })
}

fn cast<T: Scalar>(g: Vec<Array4<f64>>) -> Vec<Array4<T>> {
    g.into_iter().map(|a| a.mapv(T::of)).collect()
}

/// Weighted loss on the main predictions plus the same recipe on the
/// auxiliary predictions, scaled per stride by `cfg.loss.aux_weights`.
/// Pass an empty `aux` when the branch is disabled.
pub fn total_loss<T: Scalar>(
    main: &RawPrediction<T>,
    aux: &RawPrediction<T>,
    targets: &TargetMap,
    cfg: &ModelConfig,
) -> Result<LossOutput<T>> {
    let m = recipe(main, targets, cfg, &[1.0; 3])?;
    let (aux_loss, aux_grad) = if aux.is_empty() {
        (0.0, Vec::new())
    } else {
        let a = recipe(aux, targets, cfg, &cfg.loss.aux_weights).map_err(|e| match e {
            Error::NonFinite { component } => Error::NonFinite {
                component: format!("aux {component}"),
            },
            e => e,
        })?;
        (a.total, a.grad)
    };
    let total = m.total + aux_loss;
    if !total.is_finite() {
        return Err(Error::NonFinite { component: "total".into() });
    }
    Ok(LossOutput {
        breakdown: LossBreakdown {
            box_loss: m.box_loss,
            class_loss: m.class_loss,
            obj_loss: m.obj_loss,
            dfl_loss: m.dfl_loss,
            aux_loss,
            total,
            positives: targets.positive_count(),
            collisions: targets.collisions,
        },
        main_grad: cast(m.grad),
        aux_grad: cast(aux_grad),
    })
}
