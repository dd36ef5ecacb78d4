//! Acceptance gate: runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use diffinspect::data::{synth_dataset, Mask, SynthSpec, CORPUS_TRAIN_MIX};
use diffinspect::diffusion::{
    corrupt, predict_x0_from_noise, single_step_diffuse, BetaSchedule, BoxState, ScheduleConfig,
};
use diffinspect::eval::{compute_map, parse_sweep_csv, Task};
use diffinspect::model::{
    decode_mask, kernel_param_count, mask_probabilities, FusedFeatureMap, LayerSpec, MaskKernelVector,
};
use diffinspect::train::{balanced_weights, BestRecords, ImageSampler, LossConfig, Matcher};
use diffinspect::{BBox, ImageSize};
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use support::gradcheck::{loss_gradient_error, mask_decode_gradient_error, only};
use support::reference_eval::{random_fixture, reference_map};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn schedule() -> BetaSchedule<f64> {
    ScheduleConfig::default().build().unwrap()
}

fn normals(rng: &mut ChaCha8Rng, rows: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, 4), |_| rng.sample(StandardNormal))
}

/// Per-column mean and population variance.
fn moments(a: &Array2<f64>) -> Vec<(f64, f64)> {
    let n = a.nrows() as f64;
    a.columns()
        .into_iter()
        .map(|c| {
            let m = c.sum() / n;
            (m, c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n)
        })
        .collect()
}

/// Checks sample moments against `sqrt(ᾱ)·x0` and `1-ᾱ`; returns the worst
/// mean error in standard errors and the worst relative variance error.
fn check_moments(sample: &Array2<f64>, x0: &[f64; 4], ab: f64) -> Result<(f64, f64), String> {
    let n = sample.nrows() as f64;
    let (want_var, mut worst_se, mut worst_var) = (1.0 - ab, 0.0f64, 0.0f64);
    for (k, (m, v)) in moments(sample).into_iter().enumerate() {
        let se = (want_var / n).sqrt();
        worst_se = worst_se.max((m - ab.sqrt() * x0[k]).abs() / se);
        worst_var = worst_var.max((v - want_var).abs() / want_var);
    }
    ensure(worst_se <= 4.0, format!("mean off by {worst_se:.2} standard errors"))?;
    ensure(worst_var <= 0.05, format!("variance off by {:.2}%", 100.0 * worst_var))?;
    Ok((worst_se, worst_var))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let s = schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 100_000;
    let mut worst = (0.0f64, 0.0f64);
    for _ in 0..5 {
        let x0: [f64; 4] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let t = rng.random_range(1..=1000);
        let state = BoxState::new(Array2::from_shape_fn((n, 4), |(_, k)| x0[k]), 0).unwrap();
        let xt = corrupt(&state, t, normals(&mut rng, n).view(), &s).unwrap();
        let (se, var) = check_moments(&xt.boxes, &x0, s.alpha_bar(t).unwrap()).map_err(|e| format!("t={t}: {e}"))?;
        worst = (worst.0.max(se), worst.1.max(var));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "worst mean {:.2} SE, worst variance {:.2}%, {secs:.1}s",
        worst.0,
        100.0 * worst.1
    ))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let s = schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 100_000;
    let x0 = [0.7, -1.3, 0.2, -0.9];
    let mut state = BoxState::new(Array2::from_shape_fn((n, 4), |(_, k)| x0[k]), 0).unwrap();
    let mut worst = (0.0f64, 0.0f64);
    for t in 1..=1000 {
        state = single_step_diffuse(&state, t, normals(&mut rng, n).view(), &s).unwrap();
        if [1, 10, 100, 1000].contains(&t) {
            let (se, var) =
                check_moments(&state.boxes, &x0, s.alpha_bar(t).unwrap()).map_err(|e| format!("t={t}: {e}"))?;
            worst = (worst.0.max(se), worst.1.max(var));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 30.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "worst mean {:.2} SE, worst variance {:.2}%, {secs:.1}s",
        worst.0,
        100.0 * worst.1
    ))
}

fn criterion_3() -> Outcome {
    let s = schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let t = match case {
            0 => 1,
            1 => 1000,
            _ => rng.random_range(1..=1000),
        };
        let rows = rng.random_range(1..8);
        let x0 = Array2::from_shape_fn((rows, 4), |_| rng.random_range(-2.0..2.0));
        let noise = normals(&mut rng, rows);
        let xt = corrupt(&BoxState::new(x0.clone(), 0).unwrap(), t, noise.view(), &s).unwrap();
        let back = predict_x0_from_noise(&xt, noise.view(), t, &s).unwrap();
        worst = worst.max((&back - &x0).iter().fold(0.0, |a, v| a.max(v.abs())));
    }
    ensure(worst <= 1e-9, format!("worst error {worst:e}"))?;
    Ok(format!("worst error {worst:.1e} over 100 cases"))
}

fn criterion_4() -> Outcome {
    let ds = synth_dataset(&SynthSpec {
        count: 920,
        class_mix: CORPUS_TRAIN_MIX,
        image_size: 32,
        val_fraction: 0.0,
        ..SynthSpec::default()
    })
    .unwrap();
    let w = balanced_weights(&ds).unwrap();
    for (c, f) in w.class_frequencies() {
        ensure(
            (f - 0.2).abs() < 1e-12,
            format!("analytic frequency of class {c} is {f}"),
        )?;
    }
    let sampler = ImageSampler::new(w).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 100_000;
    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    for _ in 0..n {
        *counts.entry(sampler.draw(&mut rng).1.id()).or_default() += 1;
    }
    let freqs: Vec<f64> = counts.values().map(|&k| k as f64 / n as f64).collect();
    ensure(freqs.len() == 5, "not every class was drawn")?;
    let worst = freqs.iter().fold(0.0f64, |a, f| a.max((f - 0.2).abs()));
    ensure(worst <= 0.005, format!("empirical frequencies {freqs:?}"))?;
    Ok(format!("empirical frequencies {freqs:.4?}"))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let fixtures = 25;
    for i in 0..fixtures {
        let (gts, preds) = random_fixture(&mut rng);
        for (task, mask) in [(Task::BBox, false), (Task::Mask, true)] {
            let got = compute_map(&preds, &gts, task);
            let (per, map) = reference_map(&preds, &gts, mask);
            ensure(
                got.per_class_ap.keys().eq(per.keys()),
                format!("fixture {i}: class sets differ"),
            )?;
            worst = worst.max((got.map - map).abs());
            for (c, ap) in &per {
                worst = worst.max((got.per_class_ap[c] - ap).abs());
            }
        }
    }
    ensure(worst <= 1e-6, format!("worst difference {worst:e}"))?;
    Ok(format!("{fixtures} fixtures, worst difference {worst:.1e}"))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Random chains of layer widths ending in one output channel.
    let mut specs = vec![vec![(10, 8), (8, 8), (8, 1)]];
    while specs.len() < 10 {
        let depth = rng.random_range(1..=4);
        let mut widths: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=12)).collect();
        widths.push(1);
        specs.push(widths.windows(2).map(|w| (w[0], w[1])).collect());
    }
    for layers in &specs {
        let oracle: usize = layers.iter().map(|&(i, o)| i * o + o).sum();
        let got = kernel_param_count(layers).map_err(|e| e.to_string())?;
        ensure(got == oracle, format!("{layers:?}: {got} vs {oracle}"))?;
        let spec = LayerSpec::new(layers.clone()).map_err(|e| e.to_string())?;
        let theta = Array1::from_shape_fn(oracle, |_| rng.random_range(-1.0..1.0));
        let k = MaskKernelVector::new(theta.clone(), spec).unwrap();
        let back = MaskKernelVector::flatten(&k.unflatten()).unwrap();
        ensure(back.theta == theta, format!("{layers:?}: flatten/unflatten mismatch"))?;
    }
    ensure(kernel_param_count(&specs[0]).unwrap() == 169, "default spec is not 169")?;

    let saturated = |bias: f64| {
        let spec = LayerSpec::from_hidden(8, &[8, 8]).unwrap();
        let mut theta = Array1::zeros(spec.param_count());
        let n = theta.len();
        theta[n - 1] = bias;
        MaskKernelVector::new(theta, spec).unwrap()
    };
    let size = ImageSize::square(48);
    let b = BBox::new(4.0, 4.0, 20.0, 20.0);
    let ramp = FusedFeatureMap {
        map: Array3::from_shape_fn((8, 6, 6), |(a, y, x)| (a + y + x) as f64 * 0.1),
        stride: 8,
    };
    let (p, _) = mask_probabilities(&ramp, &saturated(-10.0), &b, size).unwrap();
    let sig = 1.0 / (1.0 + 10f64.exp());
    ensure(
        p.iter().all(|&v| (v - sig).abs() < 1e-12),
        "negative bias probabilities",
    )?;
    ensure(
        decode_mask(&ramp, &saturated(-10.0), &b, size, 0.5).unwrap().area() == 0,
        "negative bias mask not empty",
    )?;
    let flat = FusedFeatureMap {
        map: Array3::from_elem((8, 6, 6), 0.3),
        stride: 8,
    };
    ensure(
        decode_mask(&flat, &saturated(10.0), &b, size, 0.5).unwrap().area() == 48 * 48,
        "positive bias mask not full",
    )?;
    let square = FusedFeatureMap {
        map: Array3::from_shape_fn((1, 16, 16), |(_, y, x)| {
            if (5..11).contains(&y) && (5..11).contains(&x) {
                10.0
            } else {
                -10.0
            }
        }),
        stride: 1,
    };
    let k = MaskKernelVector::new(
        ndarray::array![1.0, 0.0, 0.0, 0.0],
        LayerSpec::new(vec![(3, 1)]).unwrap(),
    )
    .unwrap();
    let small = ImageSize::square(16);
    let mut expect = Mask::empty(small);
    expect.fill_rect(5, 5, 11, 11);
    ensure(
        decode_mask(&square, &k, &BBox::new(5.0, 5.0, 6.0, 6.0), small, 0.5).unwrap() == expect,
        "closed-form square",
    )?;
    Ok("10 layer specs, 3 decode examples".into())
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let cases = [
        ("cls", only([1.0, 0.0, 0.0, 0.0])),
        ("l1", only([0.0, 1.0, 0.0, 0.0])),
        ("giou", only([0.0, 0.0, 1.0, 0.0])),
        ("mask", only([0.0, 0.0, 0.0, 1.0])),
        ("total/hungarian", LossConfig::default()),
        (
            "total/dynamic-k",
            LossConfig {
                matcher: Matcher::DynamicK,
                ..LossConfig::default()
            },
        ),
    ];
    for (name, cfg) in cases {
        let e = loss_gradient_error(&cfg);
        ensure(e < 1e-3, format!("{name}: relative error {e:e}"))?;
        parts.push(format!("{name} {e:.0e}"));
    }
    let e = mask_decode_gradient_error();
    ensure(e < 1e-3, format!("decode_mask: relative error {e:e}"))?;
    parts.push(format!("decode_mask {e:.0e}"));
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!("{} ({secs:.1}s)", parts.join(", ")))
}

// ---- end-to-end criteria through the command-line binary ----

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.cfg")
}

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_diffinspect"))
        .args(args)
        .env_remove("DIFFINSPECT_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "`{}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Toy {
    _dir: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
    root: PathBuf,
}

fn toy_dataset() -> Result<(tempfile::TempDir, PathBuf), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    cli(&[
        "synth-data",
        "--out",
        p(&data),
        "--count",
        "200",
        "--size",
        "128",
        "--seed",
        "0",
    ])?;
    Ok((dir, data))
}

fn criterion_8(toy: &mut Option<Toy>) -> Outcome {
    let (dir, data) = toy_dataset()?;
    let run = dir.path().join("run");
    let start = Instant::now();
    cli(&[
        "train",
        "--config",
        p(&toy_config()),
        "--dataset",
        p(&data),
        "--out",
        p(&run),
    ])?;
    let secs = start.elapsed().as_secs_f64();
    let text = std::fs::read_to_string(run.join("best_ap.json")).map_err(|e| e.to_string())?;
    let best: BestRecords = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let iterations = diffinspect::train::read_metrics(&run.join("metrics.jsonl"))
        .map_err(|e| e.to_string())?
        .last()
        .map_or(0, |e| e.iteration);
    *toy = Some(Toy {
        root: dir.path().to_path_buf(),
        _dir: dir,
        data,
        run,
    });
    let summary = format!(
        "best bbox mAP {:.4} (iter {}), best mask mAP {:.4} (iter {}), {iterations} iterations in {:.1} min",
        best.bbox.map,
        best.bbox.map_iteration,
        best.mask.map,
        best.mask.map_iteration,
        secs / 60.0
    );
    ensure(iterations == 2000, format!("{summary}: stopped early"))?;
    ensure(best.bbox.map >= 0.5 && best.mask.map >= 0.4, summary.clone())?;
    Ok(summary)
}

fn criterion_9(toy: &Option<Toy>) -> Outcome {
    let toy = toy.as_ref().ok_or("needs the trained toy model from criterion 8")?;
    let csv = toy.root.join("sweep.csv");
    cli(&[
        "sweep-boxes",
        "--weights",
        p(&toy.run.join("best_model.bin")),
        "--dataset",
        p(&toy.data),
        "--config",
        p(&toy_config()),
        "--boxes",
        "500,400,300,200,100,50,25",
        "--out",
        p(&csv),
    ])?;
    let rows =
        parse_sweep_csv(&std::fs::read_to_string(&csv).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let counts: Vec<usize> = rows.iter().map(|r| r.n_boxes).collect();
    ensure(counts == [500, 400, 300, 200, 100, 50, 25], format!("rows {counts:?}"))?;
    let times: Vec<f64> = rows.iter().map(|r| r.seconds_per_image).collect();
    let violations = times.windows(2).filter(|w| w[1] >= w[0]).count();
    let at25 = rows[6].map_bbox;
    let floor = rows
        .iter()
        .filter(|r| r.n_boxes >= 100)
        .map(|r| r.map_bbox)
        .fold(f64::INFINITY, f64::min);
    let summary = format!(
        "s/image {:.4?}, bbox mAP {:.4?}",
        times,
        rows.iter().map(|r| r.map_bbox).collect::<Vec<_>>()
    );
    ensure(violations <= 1, format!("{violations} timing violations: {summary}"))?;
    ensure(
        at25 < floor,
        format!("mAP at 25 boxes {at25:.4} not below {floor:.4}: {summary}"),
    )?;
    Ok(summary)
}

fn criterion_10() -> Outcome {
    let (dir, data) = toy_dataset()?;
    let train = |name: &str| -> Result<PathBuf, String> {
        let out = dir.path().join(name);
        cli(&[
            "train",
            "--config",
            p(&toy_config()),
            "--dataset",
            p(&data),
            "--out",
            p(&out),
            "--iterations",
            "100",
            "--eval-period",
            "50",
        ])?;
        Ok(out)
    };
    let (a, b) = (train("a")?, train("b")?);
    let read = |path: PathBuf| std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()));
    let artifacts = [
        "metrics.jsonl",
        "best_ap.json",
        "best_ap.txt",
        "ckpt_50.bin",
        "ckpt_100.bin",
        "best_model.bin",
    ];
    for f in artifacts {
        ensure(
            read(a.join(f))? == read(b.join(f))?,
            format!("{f} differs between reruns"),
        )?;
    }
    let evaluate = |name: &str| -> Result<serde_json::Value, String> {
        let out = dir.path().join(name);
        cli(&[
            "evaluate",
            "--weights",
            p(&a.join("ckpt_100.bin")),
            "--dataset",
            p(&data),
            "--config",
            p(&toy_config()),
            "--out",
            p(&out),
        ])?;
        let mut v: serde_json::Value = serde_json::from_slice(&read(out)?).map_err(|e| e.to_string())?;
        v.as_object_mut().ok_or("report is not an object")?.remove("timing");
        Ok(v)
    };
    let (ea, eb) = (evaluate("eval_a.json")?, evaluate("eval_b.json")?);
    ensure(
        serde_json::to_vec(&ea).unwrap() == serde_json::to_vec(&eb).unwrap(),
        "evaluation reports differ",
    )?;
    Ok(format!(
        "{} artifacts and the evaluation report identical",
        artifacts.len()
    ))
}

fn main() -> ExitCode {
    let mut toy = None;
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome + '_>)> = vec![
        ("diffusion moments", Box::new(criterion_1)),
        ("single-step vs closed-form moments", Box::new(criterion_2)),
        ("noise inversion", Box::new(criterion_3)),
        ("balanced sampler", Box::new(criterion_4)),
        ("AP oracle equivalence", Box::new(criterion_5)),
        ("mask kernels and decoding", Box::new(criterion_6)),
        ("gradient checks", Box::new(criterion_7)),
    ];
    let mut results = Vec::new();
    let mut record = |name: &str, f: Box<dyn FnOnce() -> Outcome + '_>| {
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let n = results.len() + 1;
        match &r {
            Ok(msg) => println!("criterion {n:>2} PASS  {name}: {msg}"),
            Err(msg) => println!("criterion {n:>2} FAIL  {name}: {msg}"),
        }
        results.push(r.is_ok());
    };
    for (name, f) in criteria {
        record(name, f);
    }
    record("desk-scale training", Box::new(|| criterion_8(&mut toy)));
    record("random box sweep trend", Box::new(|| criterion_9(&toy)));
    record("determinism", Box::new(criterion_10));
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
