//! Geometric and photometric augmentations on [`Sample`]s. Boxes are kept in
//! normalized center form and transformed together with the pixels.

use image::imageops::{self, FilterType};
use image::{Rgb, Rgb32FImage};

use super::Sample;
use crate::error::{Error, Result};
use crate::geometry::GroundTruthObject;

/// Boxes whose normalized area falls below this after clipping are dropped.
pub const MIN_BOX_AREA: f64 = 1e-4;
/// Fill value for pixels with no source.
const PAD: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Horizontal,
    Vertical,
}

/// Normalized crop window `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropRegion {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Map every box through `f` on its normalized corners, clip to the unit
/// square and drop what is left empty or tiny.
fn remap(objects: &[GroundTruthObject], f: impl Fn(f64, f64, f64, f64) -> (f64, f64, f64, f64)) -> Vec<GroundTruthObject> {
    objects
        .iter()
        .filter_map(|o| {
            let (x1, y1, x2, y2) = o.corners();
            let (a, b, c, d) = f(x1, y1, x2, y2);
            let (a, b, c, d) = (a.clamp(0.0, 1.0), b.clamp(0.0, 1.0), c.clamp(0.0, 1.0), d.clamp(0.0, 1.0));
            let (w, h) = (c - a, d - b);
            (w > 0.0 && h > 0.0 && w * h >= MIN_BOX_AREA).then(|| GroundTruthObject::from_corners(o.class_id, a, b, c, d))
        })
        .collect()
}

pub fn flip(s: &Sample, axis: Axis) -> Sample {
    let (image, objects) = match axis {
        Axis::Horizontal => (
            imageops::flip_horizontal(&s.image),
            s.objects.iter().map(|o| GroundTruthObject { cx: 1.0 - o.cx, ..*o }).collect(),
        ),
        Axis::Vertical => (
            imageops::flip_vertical(&s.image),
            s.objects.iter().map(|o| GroundTruthObject { cy: 1.0 - o.cy, ..*o }).collect(),
        ),
    };
    Sample {
        image,
        objects,
        source: s.source.clone(),
    }
}

/// Cut out a window; the output has the window's pixel size.
pub fn crop(s: &Sample, r: CropRegion) -> Result<Sample> {
    let (w, h) = (s.width() as f64, s.height() as f64);
    let px0 = (r.x0.clamp(0.0, 1.0) * w).round() as u32;
    let py0 = (r.y0.clamp(0.0, 1.0) * h).round() as u32;
    let px1 = (r.x1.clamp(0.0, 1.0) * w).round() as u32;
    let py1 = (r.y1.clamp(0.0, 1.0) * h).round() as u32;
    if px1 <= px0 || py1 <= py0 {
        return Err(Error::Contract(format!(
            "empty crop region ({}, {})-({}, {})",
            r.x0, r.y0, r.x1, r.y1
        )));
    }
    let image = imageops::crop_imm(&s.image, px0, py0, px1 - px0, py1 - py0).to_image();
    let (nx0, ny0) = (px0 as f64 / w, py0 as f64 / h);
    let (sw, sh) = ((px1 - px0) as f64 / w, (py1 - py0) as f64 / h);
    let objects = remap(&s.objects, |a, b, c, d| ((a - nx0) / sw, (b - ny0) / sh, (c - nx0) / sw, (d - ny0) / sh));
    Ok(Sample {
        image,
        objects,
        source: s.source.clone(),
    })
}

fn bilinear(img: &Rgb32FImage, x: f64, y: f64) -> Option<Rgb<f32>> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    if x < -0.5 || y < -0.5 || x > w - 0.5 || y > h - 0.5 {
        return None;
    }
    let x = x.clamp(0.0, w - 1.0);
    let y = y.clamp(0.0, h - 1.0);
    let (x0, y0) = (x.floor() as u32, y.floor() as u32);
    let (x1, y1) = ((x0 + 1).min(img.width() - 1), (y0 + 1).min(img.height() - 1));
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let p = |xx, yy| img.get_pixel(xx, yy).0;
    let (a, b, c, d) = (p(x0, y0), p(x1, y0), p(x0, y1), p(x1, y1));
    Some(Rgb(std::array::from_fn(|k| {
        (a[k] * (1.0 - fx) + b[k] * fx) * (1.0 - fy) + (c[k] * (1.0 - fx) + d[k] * fx) * fy
    })))
}

/// Zoom the content about the image center by `factor` on a canvas of the
/// same size; uncovered pixels are mid-gray.
pub fn scale_jitter(s: &Sample, factor: f64) -> Result<Sample> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::Contract(format!("scale factor {factor} must be positive")));
    }
    let (w, h) = (s.width() as f64, s.height() as f64);
    let image = Rgb32FImage::from_fn(s.width(), s.height(), |x, y| {
        let sx = (x as f64 + 0.5 - w / 2.0) / factor + w / 2.0 - 0.5;
        let sy = (y as f64 + 0.5 - h / 2.0) / factor + h / 2.0 - 0.5;
        bilinear(&s.image, sx, sy).unwrap_or(Rgb([PAD; 3]))
    });
    let t = |v: f64| 0.5 + (v - 0.5) * factor;
    let objects = remap(&s.objects, |a, b, c, d| (t(a), t(b), t(c), t(d)));
    Ok(Sample {
        image,
        objects,
        source: s.source.clone(),
    })
}

/// Plain resize to `size x size`; normalized boxes are unchanged.
pub fn resize_sample(s: &Sample, size: u32) -> Sample {
    let image = if s.width() == size && s.height() == size {
        s.image.clone()
    } else {
        imageops::resize(&s.image, size, size, FilterType::Triangle)
    };
    Sample {
        image,
        objects: s.objects.clone(),
        source: s.source.clone(),
    }
}

/// 2x2 collage on an `out_size` canvas split at pixel `(xc, yc)`. Each input
/// is resized to the canvas and contributes the part that falls into its
/// quadrant (top-left, top-right, bottom-left, bottom-right), with its
/// corner at the pivot.
pub fn mosaic(samples: &[Sample; 4], out_size: u32, pivot: (u32, u32)) -> Sample {
    let s = out_size;
    let (xc, yc) = (pivot.0.min(s), pivot.1.min(s));
    let resized: Vec<Sample> = samples.iter().map(|x| resize_sample(x, s)).collect();
    // canvas offset of each resized input and its quadrant
    let si = s as i64;
    let (xi, yi) = (xc as i64, yc as i64);
    let layout = [
        ((xi - si, yi - si), (0, 0, xc, yc)),
        ((xi, yi - si), (xc, 0, s, yc)),
        ((xi - si, yi), (0, yc, xc, s)),
        ((xi, yi), (xc, yc, s, s)),
    ];
    let mut canvas = Rgb32FImage::from_pixel(s, s, Rgb([PAD; 3]));
    let mut objects = Vec::new();
    for (src, ((dx, dy), (qx0, qy0, qx1, qy1))) in resized.iter().zip(layout) {
        for y in qy0..qy1 {
            for x in qx0..qx1 {
                let (sx, sy) = (x as i64 - dx, y as i64 - dy);
                canvas.put_pixel(x, y, *src.image.get_pixel(sx as u32, sy as u32));
            }
        }
        let n = s as f64;
        let (ox, oy) = (dx as f64 / n, dy as f64 / n);
        let (q0, q1, q2, q3) = (qx0 as f64 / n, qy0 as f64 / n, qx1 as f64 / n, qy1 as f64 / n);
        objects.extend(remap(&src.objects, |a, b, c, d| {
            (
                (a + ox).clamp(q0, q2),
                (b + oy).clamp(q1, q3),
                (c + ox).clamp(q0, q2),
                (d + oy).clamp(q1, q3),
            )
        }));
    }
    Sample {
        image: canvas,
        objects,
        source: format!("mosaic({})", samples.iter().map(|x| x.source.as_str()).collect::<Vec<_>>().join(",")),
    }
}

/// `lambda a + (1 - lambda) b`, objects of both.
pub fn mixup(a: &Sample, b: &Sample, lambda: f64) -> Result<Sample> {
    if a.image.dimensions() != b.image.dimensions() {
        return Err(Error::Shape(format!(
            "mixup needs equal image sizes, got {:?} and {:?}",
            a.image.dimensions(),
            b.image.dimensions()
        )));
    }
    let l = lambda as f32;
    let mut image = a.image.clone();
    for (p, q) in image.pixels_mut().zip(b.image.pixels()) {
        for k in 0..3 {
            p.0[k] = l * p.0[k] + (1.0 - l) * q.0[k];
        }
    }
    let mut objects = a.objects.clone();
    objects.extend_from_slice(&b.objects);
    Ok(Sample {
        image,
        objects,
        source: format!("mixup({},{})", a.source, b.source),
    })
}

/// 3x3 Gaussian blur (binomial kernel), edges replicated.
pub fn gaussian_blur3(img: &Rgb32FImage) -> Rgb32FImage {
    const K: [f32; 3] = [0.25, 0.5, 0.25];
    let (w, h) = img.dimensions();
    let at = |x: i64, y: i64| img.get_pixel(x.clamp(0, w as i64 - 1) as u32, y.clamp(0, h as i64 - 1) as u32).0;
    Rgb32FImage::from_fn(w, h, |x, y| {
        let mut acc = [0.0f32; 3];
        for (j, ky) in K.iter().enumerate() {
            for (i, kx) in K.iter().enumerate() {
                let p = at(x as i64 + i as i64 - 1, y as i64 + j as i64 - 1);
                for c in 0..3 {
                    acc[c] += kx * ky * p[c];
                }
            }
        }
        Rgb(acc)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plain(w: u32, h: u32, v: f32, objects: Vec<GroundTruthObject>) -> Sample {
        Sample {
            image: Rgb32FImage::from_pixel(w, h, Rgb([v; 3])),
            objects,
            source: "t".into(),
        }
    }

    /// Sample with one filled rectangle drawn exactly at its box.
    fn drawn(w: u32, h: u32, o: GroundTruthObject) -> Sample {
        let (x1, y1, x2, y2) = o.corners();
        let image = Rgb32FImage::from_fn(w, h, |x, y| {
            let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
            if u >= x1 && u < x2 && v >= y1 && v < y2 {
                Rgb([1.0; 3])
            } else {
                Rgb([0.0; 3])
            }
        });
        Sample {
            image,
            objects: vec![o],
            source: "r".into(),
        }
    }

    /// Overlap between the bright pixels and the pixels inside the boxes.
    fn mask_agreement(s: &Sample) -> f64 {
        let (w, h) = s.image.dimensions();
        let (mut inter, mut union) = (0usize, 0usize);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
                let boxed = s.objects.iter().any(|o| {
                    let (a, b, c, d) = o.corners();
                    u >= a && u < c && v >= b && v < d
                });
                let lit = s.image.get_pixel(x, y).0[0] > 0.5;
                inter += usize::from(boxed && lit);
                union += usize::from(boxed || lit);
            }
        }
        if union == 0 { 1.0 } else { inter as f64 / union as f64 }
    }

    #[test]
    fn flip_fixtures() {
        let s = plain(10, 10, 0.0, vec![GroundTruthObject::new(0, 0.3, 0.4, 0.2, 0.2)]);
        let f = flip(&s, Axis::Horizontal);
        assert!((f.objects[0].cx - 0.7).abs() < 1e-12);
        let ff = flip(&f, Axis::Horizontal);
        assert!((ff.objects[0].cx - 0.3).abs() < 1e-9);
        let v = flip(&flip(&s, Axis::Vertical), Axis::Vertical);
        assert!((v.objects[0].cy - 0.4).abs() < 1e-9);
    }

    #[test]
    fn crop_right_half() {
        let s = plain(
            20,
            20,
            0.0,
            vec![GroundTruthObject::new(0, 0.25, 0.5, 0.1, 0.1), GroundTruthObject::new(1, 0.75, 0.5, 0.1, 0.1)],
        );
        let c = crop(&s, CropRegion { x0: 0.5, y0: 0.0, x1: 1.0, y1: 1.0 }).unwrap();
        assert_eq!(c.image.dimensions(), (10, 20));
        assert_eq!(c.objects.len(), 1);
        assert_eq!(c.objects[0].class_id, 1);
        assert!((c.objects[0].cx - 0.5).abs() < 1e-12);
        assert!(crop(&s, CropRegion { x0: 0.5, y0: 0.0, x1: 0.5, y1: 1.0 }).is_err());
    }

    #[test]
    fn mosaic_fixtures() {
        let empty = plain(16, 16, 0.3, vec![]);
        let m = mosaic(&[empty.clone(), empty.clone(), empty.clone(), empty], 32, (11, 20));
        assert!(m.objects.is_empty());
        let one = drawn(16, 16, GroundTruthObject::new(0, 0.5, 0.5, 0.5, 0.5));
        let m = mosaic(&[one.clone(), one.clone(), one.clone(), one], 32, (16, 16));
        assert!(m.objects.len() <= 4);
        assert!(m.objects.iter().all(|o| o.in_unit_range()));
        // top-left quadrant holds the bottom-right quarter of the first input,
        // whose rectangle reaches up to canvas pixel 8
        assert!(m.image.get_pixel(1, 1).0[0] > 0.99);
        assert!(m.image.get_pixel(10, 10).0[0] < 0.01);
    }

    #[test]
    fn mixup_fixtures() {
        let a = plain(4, 4, 0.2, vec![GroundTruthObject::new(0, 0.5, 0.5, 0.1, 0.1)]);
        let b = plain(4, 4, 0.6, vec![GroundTruthObject::new(1, 0.2, 0.2, 0.1, 0.1)]);
        let m = mixup(&a, &b, 0.5).unwrap();
        assert!(m.image.pixels().all(|p| (p.0[0] - 0.4).abs() < 1e-6));
        assert_eq!(m.objects.len(), 2);
        let m1 = mixup(&a, &b, 1.0).unwrap();
        assert_eq!(m1.image, a.image);
        assert!(mixup(&a, &plain(5, 4, 0.1, vec![]), 0.5).is_err());
    }

    #[test]
    fn blur_keeps_constant_images() {
        let s = plain(5, 5, 0.3, vec![]);
        assert!(gaussian_blur3(&s.image).pixels().all(|p| (p.0[1] - 0.3).abs() < 1e-6));
    }

    fn arb_object() -> impl Strategy<Value = GroundTruthObject> {
        (0.25..0.75f64, 0.25..0.75f64, 0.25..0.4f64, 0.25..0.4f64).prop_map(|(cx, cy, w, h)| GroundTruthObject::new(0, cx, cy, w, h))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn boxes_follow_pixels(o in arb_object(), factor in 0.75..1.3f64, x0 in 0.0..0.3f64, y0 in 0.0..0.3f64) {
            let s = drawn(256, 256, o);
            for out in [
                flip(&s, Axis::Horizontal),
                flip(&s, Axis::Vertical),
                scale_jitter(&s, factor).unwrap(),
                crop(&s, CropRegion { x0, y0, x1: x0 + 0.7, y1: y0 + 0.7 }).unwrap(),
                mosaic(&[s.clone(), s.clone(), s.clone(), s.clone()], 256, (96, 160)),
            ] {
                prop_assert!(out.objects.iter().all(|o| o.in_unit_range()));
                prop_assert!(mask_agreement(&out) >= 0.95, "agreement {}", mask_agreement(&out));
            }
        }
    }
}
