mod support;

use std::time::Duration;

use diffinspect::data::{synth_dataset, Annotation, ImageRecord, Split, SynthSpec};
use diffinspect::diffusion::ScheduleConfig;
use diffinspect::eval::{
    compute_map, iou_box, measure_inference_time, run_inference, sweep_random_boxes, InferenceConfig, InferenceModel,
    PredictionRecord, Predictor, Task, SCORE_THRESHOLD,
};
use diffinspect::model::{Model, ModelConfig};
use diffinspect::ImageSize;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::reference_eval::{random_fixture, reference_map};

#[test]
fn compute_map_matches_reference_on_random_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for i in 0..40 {
        let (gts, preds) = random_fixture(&mut rng);
        for (task, mask) in [(Task::BBox, false), (Task::Mask, true)] {
            let got = compute_map(&preds, &gts, task);
            let (per, map) = reference_map(&preds, &gts, mask);
            assert!((got.map - map).abs() < 1e-6, "fixture {i} {task}: {} vs {map}", got.map);
            assert_eq!(
                got.per_class_ap.keys().collect::<Vec<_>>(),
                per.keys().collect::<Vec<_>>()
            );
            for (c, ap) in &per {
                assert!((got.per_class_ap[c] - ap).abs() < 1e-6, "fixture {i} class {c}");
            }
        }
    }
}

fn fixture_strategy() -> impl Strategy<Value = (Vec<Annotation>, Vec<PredictionRecord>)> {
    any::<u64>().prop_map(|s| random_fixture(&mut ChaCha8Rng::seed_from_u64(s)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn map_is_invariant_to_prediction_order((gts, preds) in fixture_strategy(), seed in any::<u64>()) {
        let mut shuffled = preds.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for task in [Task::BBox, Task::Mask] {
            prop_assert_eq!(compute_map(&preds, &gts, task), compute_map(&shuffled, &gts, task));
        }
    }

    #[test]
    fn top_true_positive_never_lowers_ap((gts, preds) in fixture_strategy(), pick in any::<prop::sample::Index>()) {
        let g = &gts[pick.index(gts.len())];
        // The object must be unclaimed so the new detection cannot displace an existing match.
        prop_assume!(!preds.iter().any(|p| p.image_id == g.image_id
            && p.class_id == g.class.id()
            && p.score >= SCORE_THRESHOLD
            && iou_box(&p.bbox, &g.bbox) >= 0.5));
        let before = compute_map(&preds, &gts, Task::BBox).per_class_ap[&g.class.id()];
        let mut more = preds.clone();
        more.push(PredictionRecord::from_annotation(g, 1.0));
        let after = compute_map(&more, &gts, Task::BBox).per_class_ap[&g.class.id()];
        prop_assert!(after >= before, "{after} < {before}");
    }

    #[test]
    fn bottom_false_positive_never_raises_ap((gts, preds) in fixture_strategy(), pick in any::<prop::sample::Index>()) {
        let g = &gts[pick.index(gts.len())];
        let before = compute_map(&preds, &gts, Task::BBox).per_class_ap[&g.class.id()];
        let mut fp = PredictionRecord::from_annotation(g, SCORE_THRESHOLD);
        // An image without ground truth makes it a false positive.
        fp.image_id = 10_000;
        let mut more = preds.clone();
        more.push(fp);
        let after = compute_map(&more, &gts, Task::BBox).per_class_ap[&g.class.id()];
        prop_assert!(after <= before + 1e-12, "{after} > {before}");
    }

    #[test]
    fn map_is_bounded((gts, preds) in fixture_strategy()) {
        for task in [Task::BBox, Task::Mask] {
            let r = compute_map(&preds, &gts, task);
            prop_assert!((0.0..=1.0).contains(&r.map));
            prop_assert!(r.per_class_ap.values().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn ground_truth_as_predictions_scores_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let (gts, _) = random_fixture(&mut rng);
        let preds: Vec<_> = gts.iter().map(|g| PredictionRecord::from_annotation(g, 1.0)).collect();
        assert_eq!(compute_map(&preds, &gts, Task::BBox).map, 1.0);
        assert_eq!(compute_map(&preds, &gts, Task::Mask).map, 1.0);
    }
}

struct Sleeper;

impl InferenceModel for Sleeper {
    fn infer(&self, _image: &ImageRecord) -> diffinspect::Result<Vec<PredictionRecord>> {
        std::thread::sleep(Duration::from_millis(10));
        Ok(Vec::new())
    }

    fn box_count(&self) -> usize {
        1
    }

    fn steps(&self) -> usize {
        1
    }
}

#[test]
fn timing_of_a_sleeping_stub() {
    let ds = synth_dataset(&SynthSpec {
        count: 10,
        image_size: 32,
        ..SynthSpec::default()
    })
    .unwrap();
    let imgs = ds.split_images(Split::Train);
    let t = measure_inference_time(&Sleeper, &imgs).unwrap();
    assert_eq!(t.batch_count, imgs.len());
    assert!(
        (0.010..=0.013).contains(&t.seconds_per_image),
        "{}",
        t.seconds_per_image
    );
    assert!(measure_inference_time(&Sleeper, &[]).is_err());
}

fn tiny_model() -> Model<f64> {
    Model::new(
        ModelConfig {
            image_size: ImageSize::square(32),
            backbone_channels: vec![2, 4, 4, 4, 4],
            fpn_channels: 4,
            mask_channels: 4,
            mask_hidden: vec![4],
            head_hidden: 8,
            pool_size: 2,
            time_dim: 4,
            head_stages: 1,
            ..ModelConfig::default()
        },
        1,
    )
    .unwrap()
}

#[test]
fn inference_is_deterministic_and_sweep_is_ordered() {
    let ds = synth_dataset(&SynthSpec {
        count: 25,
        image_size: 32,
        ..SynthSpec::default()
    })
    .unwrap();
    let model = tiny_model();
    let cfg = InferenceConfig {
        n_boxes: 20,
        score_threshold: 0.0,
        ..InferenceConfig::default()
    };
    let p = Predictor::new(&model, &ScheduleConfig::default(), cfg).unwrap();
    let imgs = ds.split_images(Split::Validation);
    assert!(!imgs.is_empty());
    let a = run_inference(&p, &imgs).unwrap();
    assert_eq!(a, run_inference(&p, &imgs).unwrap());
    assert!(a.iter().all(|r| r.validate().is_ok()));

    let rows = sweep_random_boxes(&p, &imgs, &ds.annotations, &[5, 40, 10, 10]).unwrap();
    assert_eq!(rows.iter().map(|r| r.n_boxes).collect::<Vec<_>>(), vec![40, 10, 5]);
    assert!(
        rows.iter().all(|r| r.error.is_none() && r.seconds_per_image > 0.0),
        "{rows:?}"
    );
    assert!(sweep_random_boxes(&p, &imgs, &ds.annotations, &[]).is_err());
    assert!(sweep_random_boxes(&p, &imgs, &ds.annotations, &[0]).is_err());
}
