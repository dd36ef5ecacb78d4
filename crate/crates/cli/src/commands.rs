use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde_json::json;

use diffinspect::data::{
    class_histogram, convert_images, load_dataset, save_dataset, synth_dataset, Annotation, Dataset, DefectClass,
    ImageRecord, Split, SynthSpec, CORPUS_TRAIN_MIX, NUM_CLASSES,
};
use diffinspect::eval::{
    compute_map, evaluate, parse_sweep_csv, sweep_csv, sweep_random_boxes, PredictionRecord, Predictor, SweepRow, Task,
};
use diffinspect::model::Model;
use diffinspect::train::{read_metrics, train_loop, BestRecords, BestTable, ValidationEvent, METRICS_FILE};
use diffinspect::{Error, Result, Scalar};

use crate::config::{io, Precision, RunConfig};
use crate::plot::{draw_rect, draw_text, save_png, Chart, Panel, Series, PALETTE};

pub const BEST_TABLE_JSON: &str = "best_ap.json";
pub const BEST_TABLE_TEXT: &str = "best_ap.txt";
pub const CURVES_PNG: &str = "curves.png";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_PNG: &str = "sweep.png";

/// Process exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_input_error() {
        2
    } else {
        3
    }
}

pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    load_dataset(&dir.join("annotations.json"), &dir.join("images"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io(path, e))
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    write_text(
        path,
        &(serde_json::to_string_pretty(v).expect("json serializes") + "\n"),
    )
}

/// Per-class image counts of each split, laid out like the corpus summary table.
pub fn class_summary(ds: &Dataset) -> String {
    let train = class_histogram(ds, Split::Train);
    let val = class_histogram(ds, Split::Validation);
    let mut out = format!(
        "{:<4} {:<28} {:>6} {:>6} {:>6}\n",
        "id", "class", "train", "val", "total"
    );
    let (mut tt, mut tv) = (0, 0);
    for c in DefectClass::ALL {
        let (a, b) = (
            train.get(&c.id()).copied().unwrap_or(0),
            val.get(&c.id()).copied().unwrap_or(0),
        );
        tt += a;
        tv += b;
        let _ = writeln!(out, "{:<4} {:<28} {:>6} {:>6} {:>6}", c.id(), c.name(), a, b, a + b);
    }
    let _ = writeln!(out, "{:<4} {:<28} {:>6} {:>6} {:>6}", "", "total", tt, tv, tt + tv);
    out
}

pub fn cmd_prepare_data(images: &Path, annotations: &Path, out: &Path, to_jpg: bool) -> Result<String> {
    let ds = load_dataset(annotations, images)?;
    let problems = ds.problems();
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    save_dataset(&ds, out)?;
    let mut summary = class_summary(&ds);
    if to_jpg {
        let report = convert_images(images, &out.join("jpg"))?;
        let _ = writeln!(summary, "converted {} TIFF images to JPEG", report.count());
        for (p, e) in &report.errors {
            let _ = writeln!(summary, "conversion failed for {}: {e}", p.display());
        }
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthArgs {
    pub out: PathBuf,
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    /// Corpus class proportions instead of a uniform mix.
    pub corpus_mix: bool,
    pub val_fraction: f64,
}

pub fn cmd_synth_data(a: &SynthArgs) -> Result<String> {
    let ds = synth_dataset(&SynthSpec {
        count: a.count,
        class_mix: if a.corpus_mix {
            CORPUS_TRAIN_MIX
        } else {
            [1.0 / NUM_CLASSES as f64; NUM_CLASSES]
        },
        image_size: a.size,
        seed: a.seed,
        val_fraction: a.val_fraction,
    })?;
    save_dataset(&ds, &a.out)?;
    Ok(class_summary(&ds))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub balanced: bool,
    pub iterations: Option<usize>,
    pub eval_period: Option<usize>,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub resume: bool,
}

/// Loads the config file and applies command-line overrides.
pub fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&a.config)?;
    if a.balanced {
        cfg.set("sampler.balanced", "true")?;
    }
    if let Some(n) = a.iterations {
        cfg.set("train.iterations", &n.to_string())?;
    }
    if let Some(n) = a.eval_period {
        cfg.set("train.eval_period", &n.to_string())?;
    }
    if let Some(d) = &a.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(o) = &a.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset given (set `dataset` or pass --dataset)".into()))?;
    load_dataset_dir(dir)
}

pub fn cmd_train(a: &TrainArgs) -> Result<String> {
    let cfg = resolve_train_config(a)?;
    let ds = required_dataset(&cfg)?;
    cfg.write_echo(&cfg.out)?;
    let (history, best) = match cfg.precision {
        Precision::F32 => {
            let o = train_loop::<f32>(&ds, cfg.setup.clone(), Some(&cfg.out), a.resume)?;
            (o.state.history, o.state.best)
        }
        Precision::F64 => {
            let o = train_loop::<f64>(&ds, cfg.setup.clone(), Some(&cfg.out), a.resume)?;
            (o.state.history, o.state.best)
        }
    };
    let text = write_best_tables(&cfg.out, &best)?;
    Ok(format!(
        "{} validation events written to {}\n{text}",
        history.len(),
        cfg.out.join(METRICS_FILE).display()
    ))
}

fn table_rows(per_class: &BTreeMap<u8, f64>, map: f64) -> Vec<(String, Option<f64>)> {
    let mut rows: Vec<(String, Option<f64>)> = DefectClass::ALL
        .iter()
        .map(|c| (c.name().to_string(), per_class.get(&c.id()).copied()))
        .collect();
    rows.push(("mAP".into(), Some(map)));
    rows
}

/// Best-AP tables for box and mask tasks, as text plus a JSON twin in `dir`.
pub fn write_best_tables(dir: &Path, best: &BestRecords) -> Result<String> {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v));
    let mut text = String::new();
    let sections: [(&str, &BestTable); 2] = [("bounding box", &best.bbox), ("segmentation", &best.mask)];
    for (name, t) in sections {
        let _ = writeln!(text, "Best per category {name} APs achieved");
        let _ = writeln!(
            text,
            "{:<28} {:>10} {:>16}",
            "class",
            "best AP",
            format!("AP @ iter {}", t.map_iteration)
        );
        let best_rows = table_rows(&t.per_class, t.map);
        let single = table_rows(&t.at_best_map, t.map);
        for ((label, b), (_, s)) in best_rows.into_iter().zip(single) {
            let _ = writeln!(text, "{:<28} {:>10} {:>16}", label, fmt(b), fmt(s));
        }
        text.push('\n');
    }
    write_text(&dir.join(BEST_TABLE_TEXT), &text)?;
    write_json(
        &dir.join(BEST_TABLE_JSON),
        &serde_json::to_value(best).expect("records serialize"),
    )?;
    Ok(text)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalArgs {
    pub weights: Option<PathBuf>,
    pub dataset: PathBuf,
    pub boxes: Option<usize>,
    pub steps: Option<usize>,
    pub out: PathBuf,
    pub oracle: bool,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
}

fn base_config(config: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::with_env()?,
    };
    if let Some(s) = seed {
        cfg.set("seed", &s.to_string())?;
    }
    Ok(cfg)
}

/// Validation images when a split exists, otherwise every image.
fn eval_images(ds: &Dataset) -> Vec<&ImageRecord> {
    let val = ds.split_images(Split::Validation);
    if val.is_empty() {
        ds.images.iter().collect()
    } else {
        val
    }
}

fn gts_for(ds: &Dataset, images: &[&ImageRecord]) -> Vec<Annotation> {
    images
        .iter()
        .flat_map(|i| ds.annotations_for(i.image_id).into_iter().cloned())
        .collect()
}

fn load_weights(weights: Option<&Path>) -> Result<&Path> {
    let w = weights.ok_or_else(|| Error::Argument("--weights is required".into()))?;
    if !w.exists() {
        return Err(Error::Load {
            path: w.to_path_buf(),
            reason: "weights file not found".into(),
        });
    }
    Ok(w)
}

pub fn cmd_evaluate(a: &EvalArgs) -> Result<serde_json::Value> {
    let mut cfg = base_config(a.config.as_deref(), a.seed)?;
    if let Some(n) = a.boxes {
        cfg.set("boxes.infer", &n.to_string())?;
    }
    if let Some(k) = a.steps {
        cfg.set("sampler.steps", &k.to_string())?;
    }
    cfg.setup.eval.validate()?;
    let ds = load_dataset_dir(&a.dataset)?;
    let images = eval_images(&ds);
    let gts = gts_for(&ds, &images);
    let mut report = if a.oracle {
        let preds: Vec<PredictionRecord> = gts.iter().map(|g| PredictionRecord::from_annotation(g, 1.0)).collect();
        json!({
            "mode": "oracle",
            "bbox": compute_map(&preds, &gts, Task::BBox),
            "mask": compute_map(&preds, &gts, Task::Mask),
            "predictions": preds.len(),
        })
    } else {
        let w = load_weights(a.weights.as_deref())?;
        let r = match cfg.precision {
            Precision::F32 => eval_with::<f32>(w, &cfg, &images, &gts)?,
            Precision::F64 => eval_with::<f64>(w, &cfg, &images, &gts)?,
        };
        let mut v = serde_json::to_value(&r).expect("report serializes");
        v["mode"] = json!("model");
        v["weights"] = json!(w.display().to_string());
        v
    };
    report["seed"] = json!(cfg.seed);
    report["images"] = json!(images.len());
    report["config"] = json!(cfg
        .entries()
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect::<BTreeMap<_, _>>());
    write_json(&a.out, &report)?;
    Ok(report)
}

fn eval_with<T: Scalar>(
    weights: &Path,
    cfg: &RunConfig,
    images: &[&ImageRecord],
    gts: &[Annotation],
) -> Result<diffinspect::eval::EvalReport> {
    let model = Model::<T>::load(weights)?;
    let predictor = Predictor::new(&model, cfg.schedule(), *cfg.inference())?;
    evaluate(&predictor, images, gts)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepArgs {
    pub weights: Option<PathBuf>,
    pub dataset: PathBuf,
    pub boxes: Vec<usize>,
    pub steps: Option<usize>,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
}

pub fn cmd_sweep_boxes(a: &SweepArgs) -> Result<Vec<SweepRow>> {
    let mut cfg = base_config(a.config.as_deref(), a.seed)?;
    if let Some(k) = a.steps {
        cfg.set("sampler.steps", &k.to_string())?;
    }
    let w = load_weights(a.weights.as_deref())?;
    let ds = load_dataset_dir(&a.dataset)?;
    let images = eval_images(&ds);
    let gts = gts_for(&ds, &images);
    let rows = match cfg.precision {
        Precision::F32 => sweep_with::<f32>(w, &cfg, &a.boxes, &images, &gts)?,
        Precision::F64 => sweep_with::<f64>(w, &cfg, &a.boxes, &images, &gts)?,
    };
    write_text(&a.out, &sweep_csv(&rows))?;
    sweep_chart(&rows).save(&a.out.with_extension("png"))?;
    Ok(rows)
}

fn sweep_with<T: Scalar>(
    weights: &Path,
    cfg: &RunConfig,
    counts: &[usize],
    images: &[&ImageRecord],
    gts: &[Annotation],
) -> Result<Vec<SweepRow>> {
    let model = Model::<T>::load(weights)?;
    let predictor = Predictor::new(&model, cfg.schedule(), *cfg.inference())?;
    sweep_random_boxes(&predictor, images, gts, counts)
}

/// mAP and latency against the random box count.
pub fn sweep_chart(rows: &[SweepRow]) -> Chart {
    let pts = |f: &dyn Fn(&SweepRow) -> f64| rows.iter().map(|r| (r.n_boxes as f64, f(r))).collect::<Vec<_>>();
    Chart {
        panels: vec![
            Panel {
                title: "mAP vs random boxes".into(),
                x_label: "boxes".into(),
                y_label: "mAP".into(),
                series: vec![
                    Series {
                        name: "bbox".into(),
                        points: pts(&|r| r.map_bbox),
                    },
                    Series {
                        name: "mask".into(),
                        points: pts(&|r| r.map_mask),
                    },
                ],
            },
            Panel {
                title: "latency vs random boxes".into(),
                x_label: "boxes".into(),
                y_label: "s/image".into(),
                series: vec![Series {
                    name: "s/image".into(),
                    points: pts(&|r| r.seconds_per_image),
                }],
            },
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InferArgs {
    pub weights: Option<PathBuf>,
    pub image: PathBuf,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// Predictions for one image; also writes the overlay.
pub fn cmd_infer(a: &InferArgs) -> Result<Vec<PredictionRecord>> {
    let cfg = base_config(a.config.as_deref(), a.seed)?;
    let w = load_weights(a.weights.as_deref())?;
    let image = ImageRecord::from_file(0, &a.image)?;
    let preds = match cfg.precision {
        Precision::F32 => infer_with::<f32>(w, &cfg, &image)?,
        Precision::F64 => infer_with::<f64>(w, &cfg, &image)?,
    };
    save_png(&overlay(&image, &preds), &a.out)?;
    Ok(preds)
}

fn infer_with<T: Scalar>(weights: &Path, cfg: &RunConfig, image: &ImageRecord) -> Result<Vec<PredictionRecord>> {
    let model = Model::<T>::load(weights)?;
    let predictor = Predictor::new(&model, cfg.schedule(), *cfg.inference())?;
    predictor.predict(image)
}

/// Image with mask contours, boxes and `class:score` labels drawn in per-class colors.
pub fn overlay(image: &ImageRecord, preds: &[PredictionRecord]) -> RgbImage {
    let (w, h) = (image.width(), image.height());
    let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = image.pixels[[y as usize, x as usize]];
        image::Rgb([v, v, v])
    });
    for p in preds {
        let c = PALETTE[p.class_id as usize % PALETTE.len()];
        for y in 0..h {
            for x in 0..w {
                if !p.mask.get(x, y) {
                    continue;
                }
                let edge = x == 0
                    || y == 0
                    || x + 1 == w
                    || y + 1 == h
                    || !p.mask.get(x - 1, y)
                    || !p.mask.get(x + 1, y)
                    || !p.mask.get(x, y - 1)
                    || !p.mask.get(x, y + 1);
                if edge {
                    img.put_pixel(x as u32, y as u32, image::Rgb(c));
                }
            }
        }
        let [x1, y1, x2, y2] = p.bbox.xyxy();
        draw_rect(
            &mut img,
            x1 as i64,
            y1 as i64,
            x2.ceil() as i64 - 1,
            y2.ceil() as i64 - 1,
            c,
        );
        let label = format!("{}:{:.2}", p.class_id, p.score);
        let ty = if y1 >= 7.0 { y1 as i64 - 7 } else { y2 as i64 + 2 };
        draw_text(&mut img, x1 as i64, ty, &label, 1, c);
    }
    img
}

/// Training curves, best-AP tables and, when present, the sweep plot.
pub fn cmd_report(run: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let history = read_metrics(&run.join(METRICS_FILE))?;
    if history.is_empty() {
        return Err(Error::Validation(vec![format!(
            "{} has no validation events",
            run.join(METRICS_FILE).display()
        )]));
    }
    let mut written = Vec::new();
    let chart = curves_chart(&history);
    let png = out.join(CURVES_PNG);
    written.push(chart.save(&png)?);
    written.push(png);
    let best = BestRecords::from_history(&history);
    write_best_tables(out, &best)?;
    written.push(out.join(BEST_TABLE_TEXT));
    written.push(out.join(BEST_TABLE_JSON));
    let sweep = run.join(SWEEP_CSV);
    if sweep.exists() {
        let text = std::fs::read_to_string(&sweep).map_err(|e| io(&sweep, e))?;
        let rows = parse_sweep_csv(&text)?;
        let png = out.join(SWEEP_PNG);
        written.push(sweep_chart(&rows).save(&png)?);
        written.push(png);
    }
    Ok(written)
}

/// AP against iteration, one panel per task, one series per class plus mAP.
pub fn curves_chart(history: &[ValidationEvent]) -> Chart {
    let panel =
        |title: &str, per: &dyn Fn(&ValidationEvent) -> &BTreeMap<u8, f64>, map: &dyn Fn(&ValidationEvent) -> f64| {
            let mut series: Vec<Series> = DefectClass::ALL
                .iter()
                .filter(|c| history.iter().any(|e| per(e).contains_key(&c.id())))
                .map(|c| Series {
                    name: format!("{} {}", c.id(), c.name()),
                    points: history
                        .iter()
                        .filter_map(|e| per(e).get(&c.id()).map(|&v| (e.iteration as f64, v)))
                        .collect(),
                })
                .collect();
            series.push(Series {
                name: "mAP".into(),
                points: history.iter().map(|e| (e.iteration as f64, map(e))).collect(),
            });
            Panel {
                title: title.into(),
                x_label: "iteration".into(),
                y_label: "AP".into(),
                series,
            }
        };
    Chart {
        panels: vec![
            panel("bbox AP", &|e| &e.bbox_ap, &|e| e.map_bbox),
            panel("mask AP", &|e| &e.mask_ap, &|e| e.map_mask),
        ],
    }
}
