//! Contrast-limited adaptive histogram equalization on the luminance channel.

use image::{Rgb, Rgb32FImage};

use crate::error::{Error, Result};

const BINS: usize = 256;

fn to_ycbcr(p: [f32; 3]) -> [f32; 3] {
    let [r, g, b] = p;
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    [y, (b - y) * 0.564, (r - y) * 0.713]
}

fn to_rgb([y, cb, cr]: [f32; 3]) -> [f32; 3] {
    let r = y + 1.403 * cr;
    let b = y + 1.773 * cb;
    let g = (y - 0.299 * r - 0.114 * b) / 0.587;
    [r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), b.clamp(0.0, 1.0)]
}

fn bin(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) * (BINS - 1) as f32).round() as usize).min(BINS - 1)
}

/// Equalization lookup of one tile with the histogram clipped at
/// `clip_limit` times the uniform bin height; the excess is spread evenly.
fn tile_lut(values: impl Iterator<Item = usize>, area: usize, clip_limit: f64) -> [f32; BINS] {
    let mut hist = [0f64; BINS];
    for v in values {
        hist[v] += 1.0;
    }
    let limit = clip_limit * area as f64 / BINS as f64;
    let mut excess = 0.0;
    for h in hist.iter_mut() {
        if *h > limit {
            excess += *h - limit;
            *h = limit;
        }
    }
    let share = excess / BINS as f64;
    let mut lut = [0f32; BINS];
    let mut cdf = 0.0;
    for (l, h) in lut.iter_mut().zip(hist) {
        cdf += h + share;
        *l = (cdf / area as f64).min(1.0) as f32;
    }
    lut
}

/// CLAHE with a `tile_grid x tile_grid` layout. Per-tile mappings are
/// blended bilinearly between tile centers; chroma is kept.
pub fn clahe(img: &Rgb32FImage, clip_limit: f64, tile_grid: u32) -> Result<Rgb32FImage> {
    let (w, h) = img.dimensions();
    if tile_grid == 0 || tile_grid > w || tile_grid > h {
        return Err(Error::config(
            "augment.clahe",
            format!("tile grid {tile_grid} does not fit a {w}x{h} image"),
        ));
    }
    if clip_limit <= 0.0 {
        return Err(Error::config("augment.clahe", "clip limit must be positive"));
    }
    let ycc: Vec<[f32; 3]> = img.pixels().map(|p| to_ycbcr(p.0)).collect();
    let n = tile_grid as usize;
    let edges = |len: u32| -> Vec<u32> { (0..=n).map(|i| (i as u64 * len as u64 / n as u64) as u32).collect() };
    let (xs, ys) = (edges(w), edges(h));
    let mut luts = vec![[0f32; BINS]; n * n];
    for ty in 0..n {
        for tx in 0..n {
            let (x0, x1, y0, y1) = (xs[tx], xs[tx + 1], ys[ty], ys[ty + 1]);
            let vals = (y0..y1).flat_map(|y| (x0..x1).map(move |x| (x, y))).map(|(x, y)| bin(ycc[(y * w + x) as usize][0]));
            luts[ty * n + tx] = tile_lut(vals, ((x1 - x0) * (y1 - y0)) as usize, clip_limit);
        }
    }
    let centers = |e: &[u32]| -> Vec<f64> { e.windows(2).map(|p| (p[0] + p[1]) as f64 / 2.0).collect() };
    let (cx, cy) = (centers(&xs), centers(&ys));
    // neighbouring tile indices and blend weight along one axis
    let locate = |c: &[f64], v: f64| -> (usize, usize, f32) {
        if v <= c[0] {
            return (0, 0, 0.0);
        }
        if v >= c[n - 1] {
            return (n - 1, n - 1, 0.0);
        }
        let i = c.partition_point(|&t| t <= v) - 1;
        (i, i + 1, ((v - c[i]) / (c[i + 1] - c[i])) as f32)
    };
    Ok(Rgb32FImage::from_fn(w, h, |x, y| {
        let [yv, cb, cr] = ycc[(y * w + x) as usize];
        let b = bin(yv);
        let (x0, x1, fx) = locate(&cx, x as f64 + 0.5);
        let (y0, y1, fy) = locate(&cy, y as f64 + 0.5);
        let l = |tx: usize, ty: usize| luts[ty * n + tx][b];
        let top = l(x0, y0) * (1.0 - fx) + l(x1, y0) * fx;
        let bot = l(x0, y1) * (1.0 - fx) + l(x1, y1) * fx;
        Rgb(to_rgb([top * (1.0 - fy) + bot * fy, cb, cr]))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_dev(img: &Rgb32FImage) -> f64 {
        let v: Vec<f64> = img.pixels().map(|p| p.0[0] as f64).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
    }

    #[test]
    fn constant_stays_constant_and_shape_is_kept() {
        let img = Rgb32FImage::from_pixel(40, 30, Rgb([0.3, 0.3, 0.3]));
        let out = clahe(&img, 2.0, 8).unwrap();
        assert_eq!(out.dimensions(), (40, 30));
        let first = out.get_pixel(0, 0).0;
        assert!(out.pixels().all(|p| p.0.iter().zip(first).all(|(a, b)| (a - b).abs() < 1e-6)));
    }

    #[test]
    fn low_contrast_image_gains_spread() {
        let img = Rgb32FImage::from_fn(64, 64, |x, y| {
            let v = 0.4 + 0.2 * (((x * 7 + y * 13) % 17) as f32 / 16.0) * (x as f32 / 63.0);
            Rgb([v, v, v])
        });
        let out = clahe(&img, 2.0, 8).unwrap();
        assert!(out.pixels().all(|p| p.0.iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(std_dev(&out) > std_dev(&img));
    }

    #[test]
    fn grid_must_fit() {
        let img = Rgb32FImage::new(4, 4);
        assert!(clahe(&img, 2.0, 8).is_err());
        assert!(clahe(&img, 2.0, 0).is_err());
    }
}
