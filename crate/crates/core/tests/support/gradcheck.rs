//! Central finite-difference checks on tiny configurations, returning the
//! worst relative error found.

use diffinspect::data::{synth_dataset, Annotation, SynthSpec};
use diffinspect::diffusion::{corrupt, pad_boxes, BoxState, ScheduleConfig, SignalScaler};
use diffinspect::model::{
    mask_probabilities, mask_probabilities_backward, FusedFeatureMap, LayerSpec, MaskKernelVector, Model, ModelConfig,
};
use diffinspect::train::{image_objective, LossConfig, Matcher};
use diffinspect::{BBox, ImageSize};
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: ImageSize::square(32),
        backbone_channels: vec![1, 2, 2, 2, 2],
        fpn_channels: 1,
        mask_channels: 2,
        mask_hidden: vec![2],
        fusion_stride: 4,
        head_hidden: 4,
        pool_size: 2,
        time_dim: 4,
        head_stages: 1,
        ..ModelConfig::default()
    }
}

fn rel(fd: f64, an: f64, floor: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(floor)
}

/// Loss config with only the given component weights `[cls, l1, giou, mask]`.
pub fn only(w: [f64; 4]) -> LossConfig {
    LossConfig {
        w_cls: w[0],
        w_l1: w[1],
        w_giou: w[2],
        w_mask: w[3],
        matcher: Matcher::Hungarian,
        ..LossConfig::default()
    }
}

/// Worst relative error of the analytic loss gradient over every model parameter.
pub fn loss_gradient_error(cfg: &LossConfig) -> f64 {
    let ds = synth_dataset(&SynthSpec {
        count: 5,
        image_size: 32,
        seed: 3,
        val_fraction: 0.0,
        ..SynthSpec::default()
    })
    .unwrap();
    let image = &ds.images[1];
    let gts: Vec<Annotation> = ds.annotations_for(image.image_id).into_iter().cloned().collect();

    let mut model = Model::<f64>::new(tiny_config(), 17).unwrap();
    assert!(model.params().len() <= 500, "{} params", model.params().len());
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let jitter: Vec<f64> = model
        .params_f64()
        .iter()
        .map(|v| v + rng.random_range(-0.3..0.3))
        .collect();
    model.set_params_f64(&jitter).unwrap();

    let schedule = ScheduleConfig::default().build::<f64>().unwrap();
    let boxes: Vec<_> = gts.iter().map(|a| a.bbox).collect();
    let padded = pad_boxes::<f64, _>(&boxes, 4, image.size(), SignalScaler::default(), &mut rng).unwrap();
    let noise = Array2::from_shape_fn((4, 4), |_| rng.sample::<f64, _>(StandardNormal));
    let x0 = BoxState::new(padded.signal, 0).unwrap();
    let state = corrupt(&x0, 60, noise.view(), &schedule).unwrap();

    let obj = image_objective(&model, image, &gts, &state, cfg, true).unwrap();
    assert!(obj.total.is_finite() && obj.total > 0.0, "loss {}", obj.total);
    let grads = obj.grads.unwrap();
    let base = model.params_f64();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for j in 0..base.len() {
        let mut v = base.clone();
        v[j] += h;
        model.set_params_f64(&v).unwrap();
        let lp = image_objective(&model, image, &gts, &state, cfg, false).unwrap().total;
        v[j] -= 2.0 * h;
        model.set_params_f64(&v).unwrap();
        let lm = image_objective(&model, image, &gts, &state, cfg, false).unwrap().total;
        worst = worst.max(rel((lp - lm) / (2.0 * h), grads.values()[j], 1e-4));
    }
    worst
}

/// Worst relative error of the mask decoding gradient with respect to the
/// kernel vector, the fused features and the box.
pub fn mask_decode_gradient_error() -> f64 {
    let spec = LayerSpec::new(vec![(4, 2), (2, 1)]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let fused = FusedFeatureMap {
        map: Array3::from_shape_fn((2, 8, 8), |_| rng.random_range(-1.0..1.0)),
        stride: 2,
    };
    let theta = Array1::from_shape_fn(spec.param_count(), |_| rng.random_range(-1.0..1.0));
    let kernel = MaskKernelVector::new(theta, spec).unwrap();
    let bbox = BBox::new(3.0, 4.0, 7.0, 6.0);
    let size = ImageSize::square(16);
    let probe = Array2::from_shape_fn((16, 16), |_| rng.random_range(-1.0..1.0));
    let loss = |f: &FusedFeatureMap<f64>, k: &MaskKernelVector<f64>, b: &BBox| {
        (&mask_probabilities(f, k, b, size).unwrap().0 * &probe).sum()
    };
    let (_, cache) = mask_probabilities(&fused, &kernel, &bbox, size).unwrap();
    let g = mask_probabilities_backward(&cache, &probe.view());
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for j in 0..kernel.theta.len() {
        let mut kp = kernel.clone();
        kp.theta[j] += h;
        let mut km = kernel.clone();
        km.theta[j] -= h;
        worst = worst.max(rel(
            (loss(&fused, &kp, &bbox) - loss(&fused, &km, &bbox)) / (2.0 * h),
            g.theta[j],
            1e-4,
        ));
    }
    for (idx, &an) in g.fused.indexed_iter() {
        let mut fp = fused.clone();
        fp.map[idx] += h;
        let mut fm = fused.clone();
        fm.map[idx] -= h;
        worst = worst.max(rel(
            (loss(&fp, &kernel, &bbox) - loss(&fm, &kernel, &bbox)) / (2.0 * h),
            an,
            1e-4,
        ));
    }
    let shift = |k: usize, e: f64| {
        let (cx, cy) = bbox.center();
        let mut v = [cx, cy, bbox.w, bbox.h];
        v[k] += e;
        BBox::new(v[0] - 0.5 * v[2], v[1] - 0.5 * v[3], v[2], v[3])
    };
    for k in 0..4 {
        let fd = (loss(&fused, &kernel, &shift(k, h)) - loss(&fused, &kernel, &shift(k, -h))) / (2.0 * h);
        worst = worst.max(rel(fd, g.bbox[k], 1e-4));
    }
    worst
}
