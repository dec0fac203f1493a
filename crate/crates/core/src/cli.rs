//! Command-line front end: `train`, `eval`, `detect`, `dataset-stats` and
//! `bench`. [`run`] returns the process exit code: 0 on success, 1 for
//! usage or input errors, 2 for internal failures.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use image::imageops::FilterType;
use image::{DynamicImage, Rgb, RgbImage};

use crate::checkpoint::Checkpoint;
use crate::config::{Precision, RunConfig};
use crate::data::{is_image, load_image, Dataset, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::network::{Model, WidthPreset};
use crate::params::Branch;
use crate::scalar::Scalar;
use crate::train::{evaluate_model, predict, report_line, train};

#[derive(Parser, Debug)]
#[command(name = "goelan", version, about = "Go-ELAN object detector: train, evaluate and run detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalSplit {
    Val,
    Test,
}

impl From<EvalSplit> for Split {
    fn from(s: EvalSplit) -> Self {
        match s {
            EvalSplit::Val => Split::Val,
            EvalSplit::Test => Split::Test,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; writes logs and checkpoints to the run directory.
    Train {
        /// TOML run configuration; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset manifest (data.yaml).
        #[arg(long)]
        data: PathBuf,
        /// Run directory.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Number of epochs [default: 20].
        #[arg(long)]
        epochs: Option<usize>,
        /// Batch size [default: 8].
        #[arg(long)]
        batch: Option<usize>,
        /// Square input size [default: 640].
        #[arg(long)]
        imgsz: Option<usize>,
        /// Random seed for data order and augmentation [default: 0].
        #[arg(long)]
        seed: Option<u64>,
        /// Width preset [default: full].
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        /// Data-loading threads [default: 1].
        #[arg(long)]
        workers: Option<usize>,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        max_steps: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: EvalSplit,
        /// IoU threshold for precision, recall and the confusion matrix.
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Also print mAP at every IoU threshold from 0.5 to 0.95.
        #[arg(long)]
        iou_range: bool,
        /// Score floor for detections entering AP.
        #[arg(long, default_value_t = 0.001)]
        conf: f64,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Write the report, PR curves and confusion matrix here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "f32")]
        precision: PrecisionArg,
    },
    /// Run a checkpoint on a directory of images.
    Detect {
        #[arg(long)]
        weights: PathBuf,
        /// Image file or directory.
        #[arg(long)]
        source: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        conf: f64,
        #[arg(long, default_value_t = 0.45)]
        nms_iou: f64,
        #[arg(long, default_value = "runs/detect")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "f32")]
        precision: PrecisionArg,
    },
    /// Image counts and class histogram per split.
    DatasetStats {
        #[arg(long)]
        data: PathBuf,
    },
    /// Parameter count and FLOP estimate of a configuration.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        #[arg(long)]
        imgsz: Option<usize>,
        /// Time this many single-image forward passes.
        #[arg(long, default_value_t = 0)]
        runs: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Full,
    Toy,
}

impl From<PresetArg> for WidthPreset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Full => WidthPreset::Full,
            PresetArg::Toy => WidthPreset::Toy,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

/// Parse `argv` (including the program name) and execute it, writing
/// normal output to `out`.
pub fn run<I, S>(argv: I, out: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}

fn emit(out: &mut dyn std::io::Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn execute(cmd: Command, out: &mut dyn std::io::Write) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            data,
            out: run_dir,
            epochs,
            batch,
            imgsz,
            seed,
            preset,
            workers,
            max_steps,
            resume,
        } => {
            let mut run = load_config(config.as_deref())?;
            let t = &mut run.train;
            t.epochs = epochs.unwrap_or(t.epochs);
            t.batch = batch.unwrap_or(t.batch);
            t.seed = seed.unwrap_or(t.seed);
            t.workers = workers.unwrap_or(t.workers);
            t.max_steps = max_steps.or(t.max_steps);
            run.model.input_size = imgsz.unwrap_or(run.model.input_size);
            if let Some(p) = preset {
                run.model.preset = p.into();
            }
            run.validate()?;
            let manifest = DatasetManifest::load(&data)?;
            let summary = match run.train.precision {
                Precision::F32 => train::<f32>(run, &manifest, &run_dir, resume.as_deref())?,
                Precision::F64 => train::<f64>(run, &manifest, &run_dir, resume.as_deref())?,
            };
            let mut s = format!(
                "trained to epoch {} ({} steps); best val mAP50 {:.4}\n",
                summary.state.epoch,
                summary.state.step,
                summary.state.best_map50.unwrap_or(0.0)
            );
            if let Some(r) = &summary.last_report {
                let _ = writeln!(s, "last epoch: {}", report_line(r));
            }
            let _ = writeln!(s, "run directory: {}", run_dir.display());
            emit(out, &s)
        }
        Command::Eval {
            weights,
            data,
            split,
            iou,
            iou_range,
            conf,
            batch,
            out: report_dir,
            precision,
        } => {
            let mut run = RunConfig::default();
            run.eval.iou = iou;
            run.eval.conf = conf;
            run.eval.batch = batch;
            run.validate()?;
            let manifest = DatasetManifest::load(&data)?;
            let (report, names) = match precision {
                PrecisionArg::F32 => eval_split::<f32>(&weights, &manifest, split.into(), &run)?,
                PrecisionArg::F64 => eval_split::<f64>(&weights, &manifest, split.into(), &run)?,
            };
            let mut s = format!("{}\n", report_line(&report));
            if iou_range {
                for (i, t) in report.thresholds.iter().enumerate() {
                    let aps: Vec<f64> = report.ap.iter().filter_map(|c| c[i]).collect();
                    let m = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
                    let _ = writeln!(s, "mAP@{t:.2} {m:.4}");
                }
            }
            s.push_str(&report.to_kv(&names));
            if let Some(dir) = report_dir {
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let files = [
                    ("report.txt", report.to_kv(&names)),
                    ("pr_curve.csv", report.pr_curve_csv(&names)),
                    ("confusion_matrix.csv", report.confusion.to_csv(&names)),
                ];
                for (name, text) in files {
                    let p = dir.join(name);
                    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
                }
            }
            emit(out, &s)
        }
        Command::Detect {
            weights,
            source,
            conf,
            nms_iou,
            out: dir,
            precision,
        } => {
            let n = match precision {
                PrecisionArg::F32 => detect::<f32>(&weights, &source, conf, nms_iou, &dir)?,
                PrecisionArg::F64 => detect::<f64>(&weights, &source, conf, nms_iou, &dir)?,
            };
            emit(out, &format!("wrote detections for {n} image(s) to {}\n", dir.display()))
        }
        Command::DatasetStats { data } => {
            let manifest = DatasetManifest::load(&data)?;
            emit(out, &dataset_stats(&manifest)?)
        }
        Command::Bench {
            config,
            preset,
            imgsz,
            runs,
        } => {
            let mut run = load_config(config.as_deref())?;
            run.model.input_size = imgsz.unwrap_or(run.model.input_size);
            if let Some(p) = preset {
                run.model.preset = p.into();
            }
            emit(out, &bench(&run, runs)?)
        }
    }
}

fn eval_split<T: Scalar>(weights: &Path, manifest: &DatasetManifest, split: Split, run: &RunConfig) -> Result<(EvalReport, Vec<String>)> {
    let ck = Checkpoint::<T>::load(weights)?;
    let (have, want) = (ck.model.config().class_count, manifest.class_count());
    if have != want {
        return Err(Error::config(
            "eval",
            format!("checkpoint has {have} classes but the dataset lists {want}"),
        ));
    }
    let samples = Dataset::open(manifest, split)?.load_all()?;
    Ok((evaluate_model(&ck.model, samples, run)?, manifest.names.clone()))
}

fn image_files(source: &Path) -> Result<Vec<PathBuf>> {
    if source.is_file() {
        return Ok(vec![source.to_path_buf()]);
    }
    let rd = fs::read_dir(source).map_err(|e| Error::io(source, e))?;
    let mut files: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| is_image(p)).collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyDataset(format!("no images under {}", source.display())));
    }
    Ok(files)
}

fn draw_box(img: &mut RgbImage, (x1, y1, x2, y2): (f64, f64, f64, f64), color: [u8; 3]) {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return;
    }
    let cx = |v: f64| (v.round().max(0.0) as u32).min(w - 1);
    let cy = |v: f64| (v.round().max(0.0) as u32).min(h - 1);
    let (x1, x2, y1, y2) = (cx(x1), cx(x2), cy(y1), cy(y2));
    for x in x1..=x2 {
        img.put_pixel(x, y1, Rgb(color));
        img.put_pixel(x, y2, Rgb(color));
    }
    for y in y1..=y2 {
        img.put_pixel(x1, y, Rgb(color));
        img.put_pixel(x2, y, Rgb(color));
    }
}

const BOX_COLORS: [[u8; 3]; 6] = [
    [255, 56, 56],
    [72, 249, 10],
    [0, 148, 255],
    [255, 178, 29],
    [207, 56, 255],
    [26, 235, 223],
];

/// Write `<stem>.txt` (`class score cx cy w h`, normalized) and an
/// annotated `<stem>.png` per image. Returns the number of images.
pub fn detect<T: Scalar>(weights: &Path, source: &Path, conf: f64, nms_iou: f64, dir: &Path) -> Result<usize> {
    let ck = Checkpoint::<T>::load(weights)?;
    let model = if ck.model.has_aux() { ck.model.strip_auxiliary()? } else { ck.model };
    let s = model.config().input_size;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = image_files(source)?;
    for path in &files {
        let original = load_image(path)?;
        let (w, h) = original.dimensions();
        let resized = DynamicImage::ImageRgb32F(original.clone())
            .resize_exact(s as u32, s as u32, FilterType::Triangle)
            .to_rgb32f();
        let dets = predict(&model, &[&resized], conf, nms_iou)?.remove(0);
        let mut text = String::new();
        let mut canvas = DynamicImage::ImageRgb32F(original).to_rgb8();
        for d in &dets {
            let (cx, cy, bw, bh) = d.bbox.center_form();
            let n = s as f64;
            let _ = writeln!(text, "{} {:.6} {:.6} {:.6} {:.6} {:.6}", d.class_id, d.score, cx / n, cy / n, bw / n, bh / n);
            let (sx, sy) = (w as f64 / n, h as f64 / n);
            let b = &d.bbox;
            draw_box(&mut canvas, (b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy), BOX_COLORS[d.class_id % BOX_COLORS.len()]);
        }
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let txt = dir.join(format!("{stem}.txt"));
        fs::write(&txt, text).map_err(|e| Error::io(&txt, e))?;
        let png = dir.join(format!("{stem}.png"));
        canvas.save(&png).map_err(|e| Error::Image {
            path: png.display().to_string(),
            source: e,
        })?;
    }
    Ok(files.len())
}

/// Image counts and per-class object counts for every split in the manifest.
pub fn dataset_stats(manifest: &DatasetManifest) -> Result<String> {
    let names = &manifest.names;
    let mut s = String::new();
    let mut total_images = 0;
    let mut totals = vec![0usize; names.len()];
    for split in Split::ALL {
        if manifest.split_entries(split).is_empty() {
            continue;
        }
        let ds = Dataset::open(manifest, split)?;
        let mut counts = vec![0usize; names.len()];
        for i in 0..ds.len() {
            for o in ds.load_labels(i)? {
                counts[o.class_id] += 1;
            }
        }
        total_images += ds.len();
        let _ = writeln!(s, "{}: {} images, {} objects", split.name(), ds.len(), counts.iter().sum::<usize>());
        for (t, c) in totals.iter_mut().zip(&counts) {
            *t += c;
        }
    }
    let _ = writeln!(s, "total: {total_images} images");
    let _ = writeln!(s, "class histogram:");
    for (name, c) in names.iter().zip(&totals) {
        let _ = writeln!(s, "  {name}: {c}");
    }
    Ok(s)
}

/// Parameter counts and FLOP estimate; optionally timed forward passes.
pub fn bench(run: &RunConfig, runs: usize) -> Result<String> {
    let cfg = run.model_config(10)?;
    let input = cfg.input_size;
    let started = Instant::now();
    let model = Model::<f32>::build(cfg)?;
    let built = started.elapsed().as_secs_f64();
    let total = model.count_parameters();
    let aux = model.store().scalar_count_in(Branch::Auxiliary);
    let mut s = String::new();
    let _ = writeln!(s, "preset: {:?}, input {input}x{input}, 10 classes", run.model.preset);
    let _ = writeln!(s, "parameters: {total} ({:.1}M; main {}, auxiliary {aux})", total as f64 / 1e6, total - aux);
    let _ = writeln!(s, "FLOPs: {:.3} G (1 MAC = 2 FLOPs)", model.estimate_flops(input) / 1e9);
    let _ = writeln!(s, "build time: {built:.2} s");
    if runs > 0 {
        let inference = model.strip_auxiliary()?;
        let x = ndarray::Array4::<f32>::from_elem((1, 3, input, input), 0.5);
        let t = Instant::now();
        for _ in 0..runs {
            inference.forward_infer(&x)?;
        }
        let _ = writeln!(s, "forward: {:.1} ms/image", t.elapsed().as_secs_f64() * 1e3 / runs as f64);
    }
    Ok(s)
}
