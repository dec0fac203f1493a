//! Colored-rectangle dataset in the on-disk manifest layout, for smoke tests
//! and CI.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub image_size: u32,
    /// Images per split: train, val, test.
    pub split_sizes: [usize; 3],
    pub names: Vec<String>,
    pub min_side: u32,
    pub max_side: u32,
    pub max_objects: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            split_sizes: [8, 2, 2],
            names: vec!["red".into(), "green".into(), "blue".into()],
            min_side: 14,
            max_side: 30,
            max_objects: 2,
            seed: 7,
        }
    }
}

const PALETTE: [[u8; 3]; 6] = [
    [230, 40, 40],
    [40, 210, 60],
    [50, 80, 235],
    [235, 215, 40],
    [200, 60, 220],
    [40, 210, 220],
];

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Write `images/<split>/NNN.png`, `labels/<split>/NNN.txt` and `data.yaml`
/// under `dir`; returns the manifest path.
pub fn generate_synthetic(dir: &Path, spec: &SyntheticSpec) -> Result<PathBuf> {
    if spec.names.is_empty() || spec.names.len() > PALETTE.len() {
        return Err(Error::config("synthetic", format!("between 1 and {} classes supported", PALETTE.len())));
    }
    if spec.min_side == 0 || spec.max_side < spec.min_side || spec.max_side >= spec.image_size {
        return Err(Error::config("synthetic", "need 0 < min_side <= max_side < image_size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.image_size;
    let splits = ["train", "val", "test"];
    let mut counter = 0usize;
    for (split, &count) in splits.iter().zip(&spec.split_sizes) {
        let img_dir = dir.join("images").join(split);
        let lbl_dir = dir.join("labels").join(split);
        for d in [&img_dir, &lbl_dir] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for _ in 0..count {
            let shade = rng.random_range(30u8..70);
            let mut img = RgbImage::from_fn(s, s, |x, y| {
                let v = shade.saturating_add(((x * 31 + y * 17) % 9) as u8);
                Rgb([v, v, v])
            });
            let mut rects: Vec<(u32, u32, u32, u32, usize)> = Vec::new();
            let wanted = rng.random_range(1..=spec.max_objects);
            for _ in 0..wanted * 20 {
                if rects.len() == wanted {
                    break;
                }
                let w = rng.random_range(spec.min_side..=spec.max_side);
                let h = rng.random_range(spec.min_side..=spec.max_side);
                let x = rng.random_range(0..=s - w);
                let y = rng.random_range(0..=s - h);
                let apart = rects
                    .iter()
                    .all(|&(a, b, c, d, _)| x + w + 2 <= a || a + c + 2 <= x || y + h + 2 <= b || b + d + 2 <= y);
                if apart {
                    rects.push((x, y, w, h, rng.random_range(0..spec.names.len())));
                }
            }
            let mut label = String::new();
            for &(x, y, w, h, c) in &rects {
                for yy in y..y + h {
                    for xx in x..x + w {
                        img.put_pixel(xx, yy, Rgb(PALETTE[c]));
                    }
                }
                let n = s as f64;
                label.push_str(&format!(
                    "{c} {:.6} {:.6} {:.6} {:.6}\n",
                    (x as f64 + w as f64 / 2.0) / n,
                    (y as f64 + h as f64 / 2.0) / n,
                    w as f64 / n,
                    h as f64 / n
                ));
            }
            let stem = format!("{counter:03}");
            counter += 1;
            let img_path = img_dir.join(format!("{stem}.png"));
            img.save(&img_path).map_err(|e| Error::Image {
                path: img_path.display().to_string(),
                source: e,
            })?;
            write(&lbl_dir.join(format!("{stem}.txt")), &label)?;
        }
    }
    let manifest = dir.join("data.yaml");
    write(
        &manifest,
        &format!(
            "train: images/train\nval: images/val\ntest: images/test\nimgsz: {s}\nnames: {}\n",
            spec.names.join(", ")
        ),
    )?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, DatasetManifest, Split};

    #[test]
    fn fixture_round_trips_through_the_loader() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(dir.path(), &SyntheticSpec::default()).unwrap();
        let manifest = DatasetManifest::load(&m).unwrap();
        assert_eq!(manifest.names.len(), 3);
        let counts: Vec<usize> = Split::ALL.iter().map(|&s| Dataset::open(&manifest, s).unwrap().len()).collect();
        assert_eq!(counts, vec![8, 2, 2]);
        let train = Dataset::open(&manifest, Split::Train).unwrap();
        let s = train.load(0).unwrap();
        assert_eq!(s.image.dimensions(), (64, 64));
        assert!(!s.objects.is_empty());
        // the labelled box covers the drawn color
        let o = s.objects[0];
        let px = s.image.get_pixel((o.cx * 64.0) as u32, (o.cy * 64.0) as u32).0;
        let want = PALETTE[o.class_id];
        assert!((px[0] - want[0] as f32 / 255.0).abs() < 1e-6);
    }
}
