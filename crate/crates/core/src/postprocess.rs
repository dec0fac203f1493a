//! Decode head outputs into scored boxes and suppress duplicates.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

pub use crate::geometry::{iou, BBox};
use crate::loss::{anchor, decode_cell};
use crate::network::{RawPrediction, CLASS_OFFSET, OBJ_CHANNEL};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Detections of every image in the batch, unsorted and before NMS.
/// `score = sigmoid(obj) * max softmax(class)`; cells scoring below
/// `conf_thresh` are dropped and boxes are clipped to the image.
pub fn decode<T: Scalar>(raw: &RawPrediction<T>, conf_thresh: f64, input_size: usize) -> Vec<Vec<Detection>> {
    (0..raw.batch()).map(|b| decode_image(raw, b, conf_thresh, input_size)).collect()
}

pub fn decode_image<T: Scalar>(raw: &RawPrediction<T>, batch: usize, conf_thresh: f64, input_size: usize) -> Vec<Detection> {
    let size = input_size as f64;
    let c = raw.class_count;
    let mut out = Vec::new();
    let mut logits = vec![0.0; c];
    for scale in &raw.scales {
        let (_, _, h, w) = scale.data.dim();
        let s = scale.stride as f64;
        for gy in 0..h {
            for gx in 0..w {
                let at = |ch: usize| scale.data[[batch, ch, gy, gx]].f64();
                let obj = sigmoid(at(OBJ_CHANNEL));
                if obj < conf_thresh {
                    continue;
                }
                for (k, l) in logits.iter_mut().enumerate() {
                    *l = at(CLASS_OFFSET + k);
                }
                let (best, best_logit) = logits
                    .iter()
                    .copied()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (k, v)| if v > acc.1 { (k, v) } else { acc });
                let denom: f64 = logits.iter().map(|v| (v - best_logit).exp()).sum();
                let score = obj / denom;
                if score < conf_thresh {
                    continue;
                }
                let d = decode_cell([at(0), at(1), at(2), at(3)], scale.stride, input_size);
                let bbox = BBox::from_center((gx as f64 + d[0]) * s, (gy as f64 + d[1]) * s, d[2] * size, d[3] * size)
                    .clip(size, size);
                if bbox.is_valid() {
                    out.push(Detection {
                        bbox,
                        class_id: best,
                        score,
                    });
                }
            }
        }
    }
    out
}

/// Raw box channels `(tx, ty, tw, th)` and the cell that reproduce a pixel
/// box at the given stride. The center must not sit exactly on a cell edge.
pub fn encode(bbox: &BBox, stride: usize, input_size: usize) -> ((usize, usize), [f64; 4]) {
    let (cx, cy, w, h) = bbox.center_form();
    let s = stride as f64;
    let (fx, fy) = (cx / s, cy / s);
    let (gx, gy) = (fx.floor(), fy.floor());
    let a = anchor(stride, input_size);
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let size = input_size as f64;
    (
        (gy as usize, gx as usize),
        [
            logit(fx - gx),
            logit(fy - gy),
            logit((w / size / a).sqrt() / 2.0),
            logit((h / size / a).sqrt() / 2.0),
        ],
    )
}

/// Score descending, then class ascending, then `x1` ascending.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
}

/// Greedy non-maximum suppression: a detection survives iff its IoU with
/// every already kept detection (of the same class when `class_aware`) is
/// below `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64, class_aware: bool) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len());
    for d in sorted {
        let clash = kept
            .iter()
            .any(|k| (!class_aware || k.class_id == d.class_id) && iou(&k.bbox, &d.bbox) >= iou_thresh);
        if !clash {
            kept.push(d);
        }
    }
    kept
}

/// Decode followed by class-aware NMS for each image.
pub fn postprocess<T: Scalar>(raw: &RawPrediction<T>, conf_thresh: f64, nms_iou: f64, input_size: usize) -> Vec<Vec<Detection>> {
    decode(raw, conf_thresh, input_size)
        .into_iter()
        .map(|d| nms(&d, nms_iou, true))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ScaleOutput;
    use ndarray::Array4;
    use proptest::prelude::*;

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(x1, y1, x2, y2).unwrap(),
            class_id,
            score,
        }
    }

    fn blank(input: usize, classes: usize, fill_obj: f64) -> RawPrediction<f64> {
        RawPrediction {
            scales: [8, 16, 32]
                .iter()
                .map(|&s| {
                    let n = input.div_ceil(s);
                    let mut data = Array4::zeros((1, CLASS_OFFSET + classes, n, n));
                    data.index_axis_mut(ndarray::Axis(1), OBJ_CHANNEL).fill(fill_obj);
                    ScaleOutput { stride: s, data }
                })
                .collect(),
            class_count: classes,
            dfl_bins: 0,
        }
    }

    #[test]
    fn confident_cell_decodes_to_its_center() {
        let mut raw = blank(64, 2, -30.0);
        let d = &mut raw.scales[0].data;
        d[[0, OBJ_CHANNEL, 4, 4]] = 10.0;
        d[[0, CLASS_OFFSET + 1, 4, 4]] = 10.0;
        // small box so clipping leaves the center alone
        d[[0, 2, 4, 4]] = -2.0;
        d[[0, 3, 4, 4]] = -2.0;
        let out = decode_image(&raw, 0, 0.5, 64);
        assert_eq!(out.len(), 1);
        let (cx, cy, _, _) = out[0].bbox.center_form();
        assert!((cx - 36.0).abs() < 1e-9 && (cy - 36.0).abs() < 1e-9);
        assert_eq!(out[0].class_id, 1);
        assert!(decode_image(&raw, 0, 1.0, 64).is_empty());
    }

    #[test]
    fn lower_threshold_is_a_superset() {
        let mut raw = blank(64, 3, 0.0);
        for (i, v) in raw.scales[0].data.iter_mut().enumerate() {
            *v = ((i * 7919) % 13) as f64 / 3.0 - 2.0;
        }
        let hi = decode_image(&raw, 0, 0.4, 64);
        let lo = decode_image(&raw, 0, 0.2, 64);
        assert!(hi.iter().all(|d| lo.contains(d)));
        assert!(lo.len() >= hi.len());
    }

    #[test]
    fn nms_fixtures() {
        let a = det(0.0, 0.0, 10.0, 10.0, 0, 0.9);
        let b = det(0.0, 0.0, 10.0, 8.0, 0, 0.8);
        assert!(iou(&a.bbox, &b.bbox) > 0.5);
        assert_eq!(nms(&[b, a], 0.5, true), vec![a]);
        let c = Detection { class_id: 1, ..b };
        assert_eq!(nms(&[a, c], 0.5, true).len(), 2);
        assert_eq!(nms(&[a, c], 0.5, false).len(), 1);
    }

    #[test]
    fn encode_decode_round_trip_in_pixels() {
        let input = 128;
        for (bbox, stride) in [
            (BBox::new(10.3, 20.7, 30.1, 41.9).unwrap(), 8),
            (BBox::new(50.2, 12.9, 90.6, 70.4).unwrap(), 16),
            (BBox::new(3.3, 5.1, 120.2, 99.0).unwrap(), 32),
        ] {
            let ((gy, gx), enc) = encode(&bbox, stride, input);
            let mut raw = blank(input, 1, -30.0);
            let si = [8, 16, 32].iter().position(|&s| s == stride).unwrap();
            let d = &mut raw.scales[si].data;
            for k in 0..4 {
                d[[0, k, gy, gx]] = enc[k];
            }
            d[[0, OBJ_CHANNEL, gy, gx]] = 30.0;
            let out = decode_image(&raw, 0, 0.5, input);
            assert_eq!(out.len(), 1);
            let o = out[0].bbox;
            for (u, v) in [(o.x1, bbox.x1), (o.y1, bbox.y1), (o.x2, bbox.x2), (o.y2, bbox.y2)] {
                assert!((u - v).abs() < 1e-6, "{u} vs {v}");
            }
        }
    }

    fn arb_dets() -> impl Strategy<Value = Vec<Detection>> {
        prop::collection::vec(
            (0.0..40.0f64, 0.0..40.0f64, 1.0..25.0f64, 1.0..25.0f64, 0usize..3, 0.0..1.0f64)
                .prop_map(|(x, y, w, h, c, s)| det(x, y, x + w, y + h, c, s)),
            0..40,
        )
    }

    proptest! {
        #[test]
        fn nms_subset_separated_idempotent(dets in arb_dets(), t in 0.1..0.9f64) {
            let out = nms(&dets, t, true);
            prop_assert!(out.iter().all(|d| dets.contains(d)));
            for (i, a) in out.iter().enumerate() {
                for b in &out[i + 1..] {
                    if a.class_id == b.class_id {
                        prop_assert!(iou(&a.bbox, &b.bbox) < t);
                    }
                }
            }
            prop_assert_eq!(nms(&out, t, true), out);
        }
    }
}
