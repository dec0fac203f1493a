//! Dataset manifests, label files, augmentation and batching.

mod augment;
mod clahe;
mod pipeline;
mod synthetic;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::Rgb32FImage;
use ndarray::Array4;

pub use augment::{crop, flip, gaussian_blur3, resize_sample, mixup, mosaic, scale_jitter, Axis, CropRegion};
pub use clahe::clahe;
pub use pipeline::{sample_rng, AugmentConfig, Batch, Pipeline};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::geometry::GroundTruthObject;
use crate::scalar::Scalar;

pub const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::config("data", format!("unknown split `{s}` (expected train, val or test)"))),
        }
    }
}

/// One image with its objects.
#[derive(Clone, Debug)]
pub struct Sample {
    /// RGB, values in `[0, 1]`.
    pub image: Rgb32FImage,
    pub objects: Vec<GroundTruthObject>,
    pub source: String,
}

impl Sample {
    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }
}

/// Parse `class cx cy w h` lines. Blank lines are ignored; zero-size boxes
/// are skipped with a warning.
pub fn parse_annotation_file(text: &str, class_count: usize, path: &str) -> Result<Vec<GroundTruthObject>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_string(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields `class cx cy w h`, found {}", fields.len())));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("class `{}` is not a non-negative integer", fields[0])))?;
        if class_id >= class_count {
            return Err(err(format!("class {class_id} out of range for {class_count} classes")));
        }
        let mut v = [0.0f64; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            v[k] = f.parse().map_err(|_| err(format!("`{f}` is not a number")))?;
            if !(0.0..=1.0).contains(&v[k]) {
                return Err(err(format!("`{f}` is outside [0, 1]")));
            }
        }
        if v[2] == 0.0 || v[3] == 0.0 {
            log::warn!("{path}:{line_no}: skipping zero-size box");
            continue;
        }
        out.push(GroundTruthObject::new(class_id, v[0], v[1], v[2], v[3]));
    }
    Ok(out)
}

/// Contents of a manifest file.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub train: Vec<PathBuf>,
    pub val: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    pub names: Vec<String>,
    pub image_size: Option<usize>,
}

fn split_list(v: &str) -> Vec<String> {
    v.trim()
        .trim_start_matches('[')
        .trim_end_matches(']')
        .split(',')
        .map(|s| s.trim().trim_matches(|c| c == '"' || c == '\'').to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &root, &path.display().to_string())
    }

    /// Keys: `path` (optional root), `train`, `val`, `test`, `names`, `imgsz`.
    /// `names` takes a comma list, or indented `- name` / `k: name` lines.
    pub fn parse(text: &str, base: &Path, origin: &str) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse {
            path: origin.to_string(),
            line,
            message,
        };
        let mut entries: Vec<(String, String, usize)> = Vec::new();
        let mut names_block: Option<Vec<String>> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("");
            if line.trim().is_empty() {
                continue;
            }
            let indented = line.starts_with(' ') || line.starts_with('\t');
            if indented {
                let item = line.trim();
                let Some(block) = names_block.as_mut() else {
                    return Err(perr(i + 1, "indented line outside a `names:` block".into()));
                };
                let name = if let Some(rest) = item.strip_prefix('-') {
                    rest.trim()
                } else if let Some((_, v)) = item.split_once(':') {
                    v.trim()
                } else {
                    item
                };
                block.push(name.trim_matches(|c| c == '"' || c == '\'').to_string());
                continue;
            }
            let Some((k, v)) = line.split_once(':') else {
                return Err(perr(i + 1, format!("expected `key: value`, got `{}`", line.trim())));
            };
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k == "names" && v.is_empty() {
                names_block = Some(Vec::new());
            } else {
                entries.push((k, v, i + 1));
            }
        }
        let mut m = DatasetManifest {
            root: base.to_path_buf(),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            names: names_block.unwrap_or_default(),
            image_size: None,
        };
        if let Some((_, v, _)) = entries.iter().find(|(k, _, _)| k == "path") {
            let p = PathBuf::from(v);
            m.root = if p.is_absolute() { p } else { base.join(p) };
        }
        for (k, v, line) in &entries {
            match k.as_str() {
                "path" => {}
                "train" | "val" | "test" => {
                    let paths = split_list(v).into_iter().map(|p| m.root.join(p)).collect();
                    match k.as_str() {
                        "train" => m.train = paths,
                        "val" => m.val = paths,
                        _ => m.test = paths,
                    }
                }
                "names" => m.names = split_list(v),
                "imgsz" => {
                    m.image_size = Some(v.parse().map_err(|_| perr(*line, format!("imgsz `{v}` is not an integer")))?);
                }
                "nc" => {}
                other => log::warn!("{origin}:{line}: ignoring unknown key `{other}`"),
            }
        }
        if m.names.is_empty() {
            return Err(Error::config("manifest", format!("{origin}: `names` must list at least one class")));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = m.names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::config("manifest", format!("{origin}: duplicate class name `{dup}`")));
        }
        Ok(m)
    }

    pub fn class_count(&self) -> usize {
        self.names.len()
    }

    pub fn split_entries(&self, split: Split) -> &[PathBuf] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Image paths of a split, from directories (sorted), `.txt` lists or
    /// single files.
    pub fn images(&self, split: Split) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for entry in self.split_entries(split) {
            if entry.is_dir() {
                let mut found: Vec<PathBuf> = fs::read_dir(entry)
                    .map_err(|e| Error::io(entry, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| is_image(p))
                    .collect();
                found.sort();
                out.extend(found);
            } else if entry.extension().is_some_and(|e| e == "txt") {
                let text = fs::read_to_string(entry).map_err(|e| Error::io(entry, e))?;
                let dir = entry.parent().unwrap_or(Path::new("."));
                out.extend(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(|l| {
                    let p = PathBuf::from(l);
                    if p.is_absolute() {
                        p
                    } else {
                        dir.join(p)
                    }
                }));
            } else {
                out.push(entry.clone());
            }
        }
        Ok(out)
    }
}

pub fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// `.../images/x.png` -> `.../labels/x.txt`; without an `images` directory
/// the label sits next to the image.
pub fn label_path(image: &Path) -> PathBuf {
    let comps: Vec<_> = image.components().collect();
    let pos = comps.iter().rposition(|c| c.as_os_str() == "images");
    let mut p: PathBuf = match pos {
        Some(i) => comps
            .iter()
            .enumerate()
            .map(|(j, c)| if j == i { std::ffi::OsStr::new("labels") } else { c.as_os_str() })
            .collect(),
        None => image.to_path_buf(),
    };
    p.set_extension("txt");
    p
}

pub fn load_image(path: &Path) -> Result<Rgb32FImage> {
    image::open(path)
        .map(|img| img.to_rgb32f())
        .map_err(|e| Error::Image {
            path: path.display().to_string(),
            source: e,
        })
}

/// Images and labels of one split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub split: Split,
    pub class_count: usize,
    pub names: Vec<String>,
    pub items: Vec<(PathBuf, PathBuf)>,
}

impl Dataset {
    pub fn open(manifest: &DatasetManifest, split: Split) -> Result<Self> {
        let images = manifest.images(split)?;
        let mut missing = Vec::new();
        let mut items = Vec::with_capacity(images.len());
        for img in images {
            let label = label_path(&img);
            if !img.is_file() {
                missing.push(img.clone());
            }
            if !label.is_file() {
                missing.push(label.clone());
            }
            items.push((img, label));
        }
        if !missing.is_empty() {
            return Err(Error::MissingFiles(missing));
        }
        Ok(Self {
            split,
            class_count: manifest.class_count(),
            names: manifest.names.clone(),
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn load_labels(&self, i: usize) -> Result<Vec<GroundTruthObject>> {
        let path = &self.items[i].1;
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_annotation_file(&text, self.class_count, &path.display().to_string())
    }

    pub fn load(&self, i: usize) -> Result<Sample> {
        let (img, _) = &self.items[i];
        Ok(Sample {
            image: load_image(img)?,
            objects: self.load_labels(i)?,
            source: img.display().to_string(),
        })
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        use rayon::prelude::*;
        (0..self.len()).into_par_iter().map(|i| self.load(i)).collect()
    }
}

/// `(1, 3, H, W)` tensor of an image.
pub fn image_to_tensor<T: Scalar>(img: &Rgb32FImage) -> Array4<T> {
    let (w, h) = img.dimensions();
    Array4::from_shape_fn((1, 3, h as usize, w as usize), |(_, c, y, x)| {
        T::of(img.get_pixel(x as u32, y as u32).0[c] as f64)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotation_fixtures() {
        assert!(parse_annotation_file("", 10, "a.txt").unwrap().is_empty());
        let o = parse_annotation_file("3 0.5 0.5 0.2 0.1\n", 10, "a.txt").unwrap();
        assert_eq!(o, vec![GroundTruthObject::new(3, 0.5, 0.5, 0.2, 0.1)]);
        match parse_annotation_file("3 0.5 0.5 0.2", 10, "a.txt") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        match parse_annotation_file("0 0.5 0.5 0.2 0.1\n\n12 0.5 0.5 0.2 0.1", 10, "b.txt") {
            Err(Error::Parse { line, path, .. }) => assert_eq!((line, path.as_str()), (3, "b.txt")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_annotation_file("1 0.5 1.5 0.2 0.1", 10, "c.txt").is_err());
    }

    #[test]
    fn manifest_forms() {
        let m = DatasetManifest::parse("train: images/train\nval: images/val\nnames: [a, b c, d]\n", Path::new("/data"), "m").unwrap();
        assert_eq!(m.names, vec!["a", "b c", "d"]);
        assert_eq!(m.train, vec![PathBuf::from("/data/images/train")]);
        let m = DatasetManifest::parse("path: ds\ntrain: t.txt\nnames:\n  0: x\n  1: y\n", Path::new("/r"), "m").unwrap();
        assert_eq!(m.names, vec!["x", "y"]);
        assert_eq!(m.train, vec![PathBuf::from("/r/ds/t.txt")]);
        assert!(DatasetManifest::parse("names: a, a", Path::new("."), "m").is_err());
        assert!(DatasetManifest::parse("train: x", Path::new("."), "m").is_err());
    }

    #[test]
    fn label_paths() {
        assert_eq!(label_path(Path::new("/d/images/train/a.png")), PathBuf::from("/d/labels/train/a.txt"));
        assert_eq!(label_path(Path::new("/d/x/a.jpg")), PathBuf::from("/d/x/a.txt"));
    }

    #[test]
    fn missing_files_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        image::RgbImage::new(4, 4).save(dir.path().join("images/a.png")).unwrap();
        let m = DatasetManifest::parse("train: images\nnames: a\n", dir.path(), "m").unwrap();
        match Dataset::open(&m, Split::Train) {
            Err(Error::MissingFiles(p)) => assert_eq!(p, vec![dir.path().join("labels/a.txt")]),
            other => panic!("unexpected {other:?}"),
        }
    }
}
