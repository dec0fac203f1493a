//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use goelan::checkpoint::Checkpoint;
use goelan::config::RunConfig;
use goelan::data::{DatasetManifest, Split};
use goelan::geometry::{iou, BBox, GroundTruthObject};
use goelan::loss::{assign_batch, box_loss, dfl_loss, focal_class_loss, objectness_loss, smooth_labels, total_loss, Component, ScaleShape, TargetMap};
use goelan::metrics::{average_precision, f1_score, match_detections, GtBox};
use goelan::network::{Model, ModelConfig, RawPrediction, ScaleOutput, CLASS_OFFSET, DFL_BINS};
use goelan::postprocess::{nms, Detection};
use goelan::train::{evaluate_checkpoint, read_metrics, train};
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn criterion(results: &mut Vec<bool>, id: usize, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let took = started.elapsed();
    let outcome = match outcome {
        Ok(d) if took > limit => Err(format!("{d}; took {took:.1?}, limit {limit:?}")),
        o => o,
    };
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} [{id:>2}] {name}: {detail} ({:.2} s)", took.as_secs_f64());
    results.push(outcome.is_ok());
}

// ---------------------------------------------------------------- budgets

fn parameter_budget() -> Outcome {
    let model = Model::<f32>::build(ModelConfig::full(10)).map_err(|e| e.to_string())?;
    let n = model.count_parameters() as f64;
    let rel = (n - 50.9e6).abs() / 50.9e6;
    ensure(rel <= 0.15, format!("{n} parameters, {:.1}% off 50.9M", rel * 100.0))?;
    Ok(format!("{:.2}M parameters ({:+.1}% of 50.9M)", n / 1e6, (n - 50.9e6) / 50.9e6 * 100.0))
}

fn flop_budget() -> Outcome {
    let model = Model::<f32>::build(ModelConfig::full(10)).map_err(|e| e.to_string())?;
    let f = model.estimate_flops(640);
    let rel = (f - 237e9).abs() / 237e9;
    ensure(rel <= 0.25, format!("{:.1} GFLOPs, {:.1}% off 237", f / 1e9, rel * 100.0))?;
    Ok(format!("{:.1} GFLOPs at 640 ({:+.1}% of 237)", f / 1e9, (f - 237e9) / 237e9 * 100.0))
}

// ------------------------------------------------------ gradient checks

const FD_INPUT: usize = 256;
const FD_CLASSES: usize = 3;

fn random_prediction(rng: &mut ChaCha8Rng, batch: usize) -> RawPrediction<f64> {
    let ch = CLASS_OFFSET + FD_CLASSES + 4 * DFL_BINS;
    RawPrediction {
        scales: ScaleShape::for_input(FD_INPUT)
            .into_iter()
            .map(|s| ScaleOutput {
                stride: s.stride,
                data: Array4::from_shape_fn((batch, ch, s.h, s.w), |_| rng.random_range(-2.0..2.0)),
            })
            .collect(),
        class_count: FD_CLASSES,
        dfl_bins: DFL_BINS,
    }
}

fn random_targets(rng: &mut ChaCha8Rng, batch: usize) -> TargetMap {
    let gts: Vec<Vec<GroundTruthObject>> = (0..batch)
        .map(|_| {
            (0..rng.random_range(1..=4))
                .map(|_| {
                    let w: f64 = rng.random_range(0.05..0.9);
                    let h: f64 = rng.random_range(0.05..0.9);
                    let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
                    let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
                    GroundTruthObject::new(rng.random_range(0..FD_CLASSES), cx, cy, w, h)
                })
                .collect()
        })
        .collect();
    assign_batch(&gts, &ScaleShape::for_input(FD_INPUT), FD_INPUT, FD_CLASSES, 0.1).unwrap()
}

/// Coordinates to probe: every channel of every positive cell plus random
/// entries elsewhere.
fn probe_points(rng: &mut ChaCha8Rng, pred: &RawPrediction<f64>, t: &TargetMap) -> Vec<(usize, [usize; 4])> {
    let mut pts = Vec::new();
    for (si, st) in t.scales.iter().enumerate() {
        let ch = pred.scales[si].data.dim().1;
        for p in &st.positives {
            pts.extend((0..ch).map(|c| (si, [p.batch, c, p.gy, p.gx])));
        }
    }
    for _ in 0..150 {
        let si = rng.random_range(0..pred.scales.len());
        let (b, c, h, w) = pred.scales[si].data.dim();
        pts.push((si, [rng.random_range(0..b), rng.random_range(0..c), rng.random_range(0..h), rng.random_range(0..w)]));
    }
    pts
}

/// Relative error `|fd - an| / (|fd| + |an|)` over the probe points.
fn fd_error(
    pred: &RawPrediction<f64>,
    pts: &[(usize, [usize; 4])],
    grad: &[Array4<f64>],
    mut value: impl FnMut(&RawPrediction<f64>) -> f64,
) -> f64 {
    let h = 1e-5;
    let mut work = pred.clone();
    let (mut diff, mut norm_fd, mut norm_an) = (0.0, 0.0, 0.0);
    for &(si, idx) in pts {
        let x = pred.scales[si].data[idx];
        work.scales[si].data[idx] = x + h;
        let up = value(&work);
        work.scales[si].data[idx] = x - h;
        let down = value(&work);
        work.scales[si].data[idx] = x;
        let fd = (up - down) / (2.0 * h);
        let an = grad[si][idx];
        diff += (fd - an).powi(2);
        norm_fd += fd * fd;
        norm_an += an * an;
    }
    let scale = norm_fd.sqrt() + norm_an.sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut cfg = ModelConfig::toy(FD_CLASSES, FD_INPUT);
    cfg.loss.dfl = true;
    let mut worst = [0.0f64; 5];
    let names = ["focal", "box", "objectness", "dfl", "total"];
    let instances = 20;
    for i in 0..instances {
        let batch = 2;
        let pred = random_prediction(&mut rng, batch);
        let aux = random_prediction(&mut rng, batch);
        let t = random_targets(&mut rng, batch);
        let pts = probe_points(&mut rng, &pred, &t);
        type LossFn<'a> = Box<dyn Fn(&RawPrediction<f64>) -> Component + 'a>;
        let comps: [LossFn; 4] = [
            Box::new(|p| focal_class_loss(p, &t, 0.25, 2.0).unwrap().component),
            Box::new(|p| box_loss(p, &t, 5.0).unwrap()),
            Box::new(|p| objectness_loss(p, &t).unwrap()),
            Box::new(|p| dfl_loss(p, &t).unwrap()),
        ];
        for (k, f) in comps.iter().enumerate() {
            let c = f(&pred);
            worst[k] = worst[k].max(fd_error(&pred, &pts, &c.grad, |p| f(p).value));
        }
        // the combined loss is slower to probe; a quarter of the instances suffice
        if i % 4 != 0 {
            continue;
        }
        let out = total_loss(&pred, &aux, &t, &cfg).map_err(|e| e.to_string())?;
        let e_main = fd_error(&pred, &pts, &out.main_grad, |p| total_loss(p, &aux, &t, &cfg).unwrap().breakdown.total);
        let e_aux = fd_error(&aux, &pts, &out.aux_grad, |a| total_loss(&pred, a, &t, &cfg).unwrap().breakdown.total);
        worst[4] = worst[4].max(e_main).max(e_aux);
    }
    let detail = names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect::<Vec<_>>().join(", ");
    ensure(worst.iter().all(|&w| w <= 1e-4), format!("worst relative error above 1e-4: {detail}"))?;
    Ok(format!("{instances} instances, worst relative error: {detail}"))
}

// ------------------------------------------------------------ strip

fn strip_equivalence() -> Outcome {
    let mut model = Model::<f64>::build(ModelConfig::toy(3, 64)).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // non-trivial running statistics
    for b in model.store_mut().buffers_mut() {
        let var = b.name.ends_with("var");
        b.value.mapv_inplace(|_| if var { rng.random_range(0.5..2.0) } else { rng.random_range(-0.5..0.5) });
    }
    ensure(model.has_aux(), "toy model has no auxiliary branch")?;
    let stripped = model.strip_auxiliary().map_err(|e| e.to_string())?;
    ensure(!stripped.has_aux(), "auxiliary branch survived stripping")?;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let x = Array4::from_shape_fn((1, 3, 64, 64), |_| rng.random_range(0.0..1.0));
        let a = model.forward_infer(&x).map_err(|e| e.to_string())?;
        let b = stripped.forward_infer(&x).map_err(|e| e.to_string())?;
        worst = worst.max(a.max_abs_diff(&b));
    }
    ensure(worst <= 1e-6, format!("max difference {worst:e}"))?;
    Ok(format!(
        "10 inputs, max |diff| {worst:e}; {} -> {} parameters",
        model.count_parameters(),
        stripped.count_parameters()
    ))
}

// ------------------------------------------------------------ oracles

fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Textbook NMS: repeatedly take the best remaining box and delete its
/// same-class overlaps.
fn oracle_nms(dets: &[Detection], thresh: f64) -> Vec<Detection> {
    let mut alive = vec![true; dets.len()];
    let mut out = Vec::new();
    loop {
        let best = (0..dets.len()).filter(|&i| alive[i]).max_by(|&i, &j| {
            dets[i]
                .score
                .total_cmp(&dets[j].score)
                .then(dets[j].class_id.cmp(&dets[i].class_id))
                .then(dets[j].bbox.x1.total_cmp(&dets[i].bbox.x1))
        });
        let Some(i) = best else { break };
        alive[i] = false;
        out.push(dets[i]);
        for j in 0..dets.len() {
            if alive[j] && dets[j].class_id == dets[i].class_id && oracle_iou(&dets[i].bbox, &dets[j].bbox) >= thresh {
                alive[j] = false;
            }
        }
    }
    out
}

fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BBox {
    let x1 = rng.random_range(0.0..extent);
    let y1 = rng.random_range(0.0..extent);
    BBox::new(x1, y1, x1 + rng.random_range(2.0..40.0), y1 + rng.random_range(2.0..40.0)).unwrap()
}

fn jitter(rng: &mut ChaCha8Rng, b: &BBox, amount: f64) -> BBox {
    let mut d = || rng.random_range(-amount..amount);
    let (x1, y1) = (b.x1 + d(), b.y1 + d());
    let (x2, y2) = ((b.x2 + d()).max(x1 + 1.0), (b.y2 + d()).max(y1 + 1.0));
    BBox::new(x1, y1, x2, y2).unwrap()
}

/// Score-ordered greedy matching from a full IoU table.
fn oracle_match(dets: &[Detection], gts: &[GtBox], thresh: f64) -> (usize, usize, usize) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let table: Vec<Vec<f64>> = dets.iter().map(|d| gts.iter().map(|g| oracle_iou(&d.bbox, &g.bbox)).collect()).collect();
    let mut used = vec![false; gts.len()];
    let mut tp = 0;
    for &i in &order {
        let mut pick = None;
        let mut best = f64::NEG_INFINITY;
        for (j, g) in gts.iter().enumerate() {
            if !used[j] && g.class_id == dets[i].class_id && table[i][j] >= thresh && table[i][j] > best {
                best = table[i][j];
                pick = Some(j);
            }
        }
        if let Some(j) = pick {
            used[j] = true;
            tp += 1;
        }
    }
    (tp, dets.len() - tp, gts.len() - tp)
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for scene in 0..500 {
        let n = rng.random_range(0..40);
        let dets: Vec<Detection> = (0..n)
            .map(|_| Detection {
                bbox: random_box(&mut rng, 80.0),
                class_id: rng.random_range(0..3),
                score: rng.random_range(0.0..1.0),
            })
            .collect();
        let t = rng.random_range(0.2..0.8);
        let got = nms(&dets, t, true);
        let want = oracle_nms(&dets, t);
        ensure(got == want, format!("NMS differs from the reference on scene {scene}"))?;
    }
    let mut matched = 0;
    for scene in 0..200 {
        let gts: Vec<GtBox> = (0..rng.random_range(0..12))
            .map(|_| GtBox {
                bbox: random_box(&mut rng, 150.0),
                class_id: rng.random_range(0..3),
            })
            .collect();
        let mut dets = Vec::new();
        for g in &gts {
            if !rng.random_bool(0.8) {
                continue;
            }
            for _ in 0..rng.random_range(1..3) {
                let class_id = if rng.random_bool(0.9) { g.class_id } else { rng.random_range(0..3) };
                dets.push(Detection {
                    bbox: jitter(&mut rng, &g.bbox, 6.0),
                    class_id,
                    score: rng.random_range(0.0..1.0),
                });
            }
        }
        for _ in 0..rng.random_range(0..5) {
            dets.push(Detection {
                bbox: random_box(&mut rng, 150.0),
                class_id: rng.random_range(0..3),
                score: rng.random_range(0.0..1.0),
            });
        }
        let t = rng.random_range(0.3..0.7);
        let m = match_detections(&dets, &gts, t);
        let want = oracle_match(&dets, &gts, t);
        ensure((m.tp(), m.fp(), m.fn_count()) == want, format!("matcher differs on scene {scene}: {:?} vs {want:?}", (m.tp(), m.fp(), m.fn_count())))?;
        matched += m.tp();
    }
    // hand-integrated all-points staircases
    let fixtures: [(&[(f64, bool)], usize, f64); 5] = [
        (&[(0.9, true), (0.8, false), (0.7, true)], 2, 5.0 / 6.0),
        (&[(0.9, true), (0.5, true), (0.1, true)], 4, 0.75),
        (&[(0.9, false), (0.8, true)], 1, 0.5),
        (&[(0.9, true), (0.8, false), (0.7, false), (0.6, true), (0.5, true)], 4, 0.25 + 0.25 * 0.6 + 0.25 * 0.6),
        (&[(0.3, false), (0.2, true), (0.1, true)], 2, 2.0 / 3.0),
    ];
    for (k, (scored, n, want)) in fixtures.iter().enumerate() {
        let ap = average_precision(scored, *n).ok_or("AP undefined")?;
        ensure((ap - want).abs() <= 1e-9, format!("AP fixture {k}: {ap} vs {want}"))?;
    }
    Ok(format!("500 NMS scenes, 200 matcher scenes ({matched} TPs), 5 AP staircases agree"))
}

fn metric_fixtures() -> Outcome {
    let f1 = f1_score(0.859, 0.598);
    ensure((f1 - 0.705).abs() <= 5e-4, format!("F1 {f1}"))?;
    let v = iou(&BBox::new(0.0, 0.0, 2.0, 2.0).unwrap(), &BBox::new(1.0, 1.0, 3.0, 3.0).unwrap());
    ensure((v - 1.0 / 7.0).abs() <= 1e-12, format!("IoU {v}"))?;
    Ok(format!("F1 {f1:.6}, IoU {v:.15}"))
}

fn label_smoothing() -> Outcome {
    let t = smooth_labels(3, 10, 0.1).map_err(|e| e.to_string())?;
    ensure(t.len() == 10, "length")?;
    for (i, v) in t.iter().enumerate() {
        let want = if i == 3 { 0.91 } else { 0.01 };
        ensure((v - want).abs() <= 1e-12, format!("entry {i} = {v}"))?;
    }
    let sum: f64 = t.iter().sum();
    ensure((sum - 1.0).abs() <= 1e-12, format!("sum {sum}"))?;
    Ok(format!("(0.91, 0.01 x9), sum - 1 = {:e}", sum - 1.0))
}

// ------------------------------------------------------- training runs

struct Smoke {
    dir: tempfile::TempDir,
    manifest: DatasetManifest,
}

fn smoke_run(smoke: &Smoke, name: &str) -> Result<(), String> {
    train::<f32>(common::smoke_config(), &smoke.manifest, &smoke.dir.path().join(name), None)
        .map(|_| ())
        .map_err(|e| e.to_string())
}

fn overfit(smoke: &Smoke) -> Outcome {
    smoke_run(smoke, "run_a")?;
    let run_dir = smoke.dir.path().join("run_a");
    let ck = Checkpoint::<f32>::load(&run_dir.join("checkpoints/last.ckpt")).map_err(|e| e.to_string())?;
    let steps = ck.state.as_ref().map_or(0, |s| s.step);
    ensure(steps <= 500, format!("{steps} steps"))?;
    let report = evaluate_checkpoint::<f32>(&run_dir.join("checkpoints/last.ckpt"), &smoke.manifest, Split::Train, &RunConfig::toy(64))
        .map_err(|e| e.to_string())?;
    let rows = read_metrics(&run_dir.join("metrics.csv")).map_err(|e| e.to_string())?;
    let loss = |r: &Vec<(String, String)>| r.iter().find(|(k, _)| k == "total_loss").and_then(|(_, v)| v.parse::<f64>().ok());
    let (first, last) = (rows.first().and_then(loss), rows.last().and_then(loss));
    ensure(report.map50 >= 0.9, format!("train mAP@0.5 {:.4} after {steps} steps", report.map50))?;
    Ok(format!(
        "train mAP@0.5 {:.4} (mAP@0.5:0.95 {:.4}) after {steps} steps; loss {:.3} -> {:.3}",
        report.map50,
        report.map50_95,
        first.unwrap_or(f64::NAN),
        last.unwrap_or(f64::NAN)
    ))
}

fn determinism(smoke: &Smoke) -> Outcome {
    smoke_run(smoke, "run_b")?;
    let read = |run: &str| std::fs::read(smoke.dir.path().join(run).join("metrics.csv")).map_err(|e| e.to_string());
    let (a, b) = (read("run_a")?, read("run_b")?);
    ensure(!a.is_empty(), "empty metrics.csv")?;
    ensure(a == b, "metrics.csv differs between identical runs")?;
    Ok(format!("two seeded runs wrote identical metrics.csv ({} bytes)", a.len()))
}

fn schedule_check(data: &Path) -> Outcome {
    let manifest = DatasetManifest::load(data).map_err(|e| e.to_string())?;
    let mut run = RunConfig::toy(64);
    run.train.epochs = 4;
    run.train.batch = 2;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    train::<f32>(run.clone(), &manifest, dir.path(), None).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(dir.path().join("schedule.csv")).map_err(|e| e.to_string())?;
    let rows: Vec<(usize, f64, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect();
    let spe = 4; // 8 images, batch 2
    let warm = 3 * spe;
    ensure(rows.len() == 4 * spe, format!("{} logged steps", rows.len()))?;
    ensure(run.train.lr0 == 0.01 && run.train.momentum == 0.937 && run.train.warmup_momentum == 0.8, "recipe defaults changed")?;
    let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
    let (s0, l0, m0) = rows[0];
    ensure(s0 == 0 && close(l0, 0.0) && close(m0, 0.8), format!("step 0 logged lr {l0} momentum {m0}"))?;
    for &(s, l, m) in &rows[..warm] {
        let f = s as f64 / warm as f64;
        ensure(close(l, 0.01 * f) && close(m, 0.8 + 0.137 * f), format!("step {s}: lr {l} momentum {m} off the linear ramp"))?;
    }
    let (_, lm, mm) = rows[warm / 2];
    ensure(close(lm, 0.005) && close(mm, 0.8685), format!("midpoint lr {lm} momentum {mm}"))?;
    for &(s, l, m) in &rows[warm..] {
        ensure(close(l, 0.01) && close(m, 0.937), format!("step {s} after warmup: lr {l} momentum {m}"))?;
    }
    let echo = std::fs::read_to_string(dir.path().join("config-echo.toml")).map_err(|e| e.to_string())?;
    ensure(echo.contains("momentum = 0.937") && echo.contains("weight_decay = 0.0005") && echo.contains("warmup_epochs = 3.0"), "recipe missing from config echo")?;
    Ok(format!("lr 0 -> 0.01 and momentum 0.8 -> 0.937 over steps 0..{warm} (3.0 epochs of {spe} steps), flat afterwards"))
}

fn main() {
    let mut results = Vec::new();
    let fixture = tempfile::tempdir().unwrap();
    let (data, smoke_manifest) = common::fixture(fixture.path());
    let smoke = Smoke {
        dir: tempfile::tempdir().unwrap(),
        manifest: DatasetManifest::load(&smoke_manifest).unwrap(),
    };
    let secs = Duration::from_secs;
    println!("running acceptance criteria");
    criterion(&mut results, 1, "parameter budget", secs(10), parameter_budget);
    criterion(&mut results, 2, "FLOP budget", secs(10), flop_budget);
    criterion(&mut results, 3, "loss gradients vs finite differences", secs(120), gradient_checks);
    criterion(&mut results, 4, "auxiliary strip equivalence", secs(60), strip_equivalence);
    criterion(&mut results, 5, "NMS, matcher and AP oracles", secs(120), oracle_equivalence);
    criterion(&mut results, 6, "metric fixtures", secs(10), metric_fixtures);
    criterion(&mut results, 7, "overfit smoke test", secs(600), || overfit(&smoke));
    criterion(&mut results, 8, "label smoothing", secs(10), label_smoothing);
    criterion(&mut results, 9, "determinism", secs(600), || determinism(&smoke));
    criterion(&mut results, 10, "warmup schedule", secs(120), || schedule_check(&data));
    let passed = results.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
