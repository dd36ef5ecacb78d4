use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::loss::{LossComponents, LossConfig};
use super::objective::image_objective;
use super::sampler::{balanced_weights, uniform_weights, ImageSampler};
use crate::data::{horizontal_flip, Annotation, Dataset, ImageRecord, Split};
use crate::diffusion::{corrupt, pad_boxes, BetaSchedule, BoxState, ScheduleConfig, SignalScaler};
use crate::error::{Error, Result};
use crate::eval::{compute_map, run_inference, InferenceConfig, Predictor, Task};
use crate::model::{Model, ModelConfig};
use crate::nn::{read_container, write_container, AdamW, AdamWConfig, Grads};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub eval_period: usize,
    pub seed: u64,
    /// Class-balanced image sampling instead of uniform.
    pub balanced: bool,
    /// Boxes per image fed to the head during training (ground truth plus noise padding).
    pub proposals: usize,
    pub flip_prob: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Iterations between sampled-class-frequency log lines.
    pub log_period: usize,
    /// Linear ramp from 1% of `lr` over this many iterations.
    pub warmup_iters: usize,
    /// Iterations at which the rate is multiplied by `decay_factor`.
    pub decay_steps: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            batch_size: 8,
            lr: 2.5e-5,
            weight_decay: 1e-4,
            eval_period: 1000,
            seed: 0,
            balanced: false,
            proposals: 500,
            flip_prob: 0.5,
            clip_norm: 1.0,
            log_period: 1000,
            warmup_iters: 1000,
            decay_steps: vec![23_333, 28_000],
            decay_factor: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 || self.eval_period == 0 || self.proposals == 0 || self.log_period == 0 {
            return bad("batch size, eval period, proposals and log period must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("learning rate and weight decay must be finite and nonnegative");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip probability must be in [0, 1]");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip norm must be nonnegative");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("decay factor must be in (0, 1]");
        }
        Ok(())
    }

    /// Learning rate applied by the update that follows `iteration` completed steps.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let warm = if iteration < self.warmup_iters {
            let f = iteration as f64 / self.warmup_iters as f64;
            0.01 * (1.0 - f) + f
        } else {
            1.0
        };
        let decays = self.decay_steps.iter().filter(|&&s| iteration >= s).count();
        self.lr * warm * self.decay_factor.powi(decays as i32)
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Everything a training run is parameterized by.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    /// Sampling settings used at validation events.
    pub eval: InferenceConfig,
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationEvent {
    pub iteration: usize,
    pub bbox_ap: BTreeMap<u8, f64>,
    pub mask_ap: BTreeMap<u8, f64>,
    pub map_bbox: f64,
    pub map_mask: f64,
    /// Mean training loss since the previous event.
    pub train_loss: f64,
}

/// Best-so-far numbers for one task.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BestTable {
    /// Running maximum of each class independently.
    pub per_class: BTreeMap<u8, f64>,
    /// Running maximum of mAP.
    pub map: f64,
    /// Iteration of the event that set `map`.
    pub map_iteration: usize,
    /// Per-class APs of that same event.
    pub at_best_map: BTreeMap<u8, f64>,
}

impl BestTable {
    /// Folds one event in; returns whether mAP improved.
    fn update(&mut self, iteration: usize, per_class: &BTreeMap<u8, f64>, map: f64) -> bool {
        for (&c, &ap) in per_class {
            let e = self.per_class.entry(c).or_insert(ap);
            *e = e.max(ap);
        }
        if self.at_best_map.is_empty() || map > self.map {
            self.map = map;
            self.map_iteration = iteration;
            self.at_best_map = per_class.clone();
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BestRecords {
    pub bbox: BestTable,
    pub mask: BestTable,
}

impl BestRecords {
    /// Recomputes the records from a history; used by reports and tests.
    pub fn from_history(history: &[ValidationEvent]) -> Self {
        let mut b = Self::default();
        for e in history {
            b.update(e);
        }
        b
    }

    /// Returns whether the bbox mAP record improved.
    pub fn update(&mut self, e: &ValidationEvent) -> bool {
        self.mask.update(e.iteration, &e.mask_ap, e.map_mask);
        self.bbox.update(e.iteration, &e.bbox_ap, e.map_bbox)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub iteration: usize,
    pub seed: u64,
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    pub best: BestRecords,
    pub history: Vec<ValidationEvent>,
    /// Images drawn per class since the start of the run.
    pub class_draws: BTreeMap<u8, u64>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: Model<T>, optimizer: AdamWConfig, seed: u64) -> Self {
        let n = model.params().len();
        Self {
            iteration: 0,
            seed,
            model,
            optimizer: AdamW::new(optimizer, n),
            best: BestRecords::default(),
            history: Vec::new(),
            class_draws: BTreeMap::new(),
        }
    }

    /// Model, optimizer moments and bookkeeping in one container file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = json!({
            "kind": "train",
            "model": self.model.header("model"),
            "iteration": self.iteration,
            "seed": self.seed,
            "optimizer_step": self.optimizer.step,
            "optimizer_lr": self.optimizer.config.lr,
            "best": self.best,
            "history": self.history,
            "class_draws": self.class_draws,
        });
        let f = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        write_container(
            path,
            &header,
            &[self.model.params_f64(), f(&self.optimizer.m), f(&self.optimizer.v)],
        )
    }

    /// Restores a state written by [`Self::save`]. `optimizer` supplies the
    /// hyperparameters; the learning rate in effect when saved is restored on top.
    pub fn load(path: &Path, optimizer: AdamWConfig) -> Result<Self> {
        let (header, blocks) = read_container(path)?;
        let bad = |reason: String| Error::Load {
            path: path.to_path_buf(),
            reason,
        };
        if header["kind"] != "train" {
            return Err(bad("not a training checkpoint".into()));
        }
        if blocks.len() != 3 {
            return Err(bad(format!("expected 3 blocks, found {}", blocks.len())));
        }
        let model = Model::from_parts(path, &header["model"], Some(&blocks[0]))?;
        let n = model.params().len();
        if blocks[1].len() != n || blocks[2].len() != n {
            return Err(bad("optimizer state does not match the parameter count".into()));
        }
        let h: CheckpointHeader =
            serde_json::from_value(header.clone()).map_err(|e| bad(format!("bad training header: {e}")))?;
        let lit = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<_>>();
        Ok(Self {
            iteration: h.iteration,
            seed: h.seed,
            optimizer: AdamW {
                config: AdamWConfig {
                    lr: h.optimizer_lr,
                    ..optimizer
                },
                step: h.optimizer_step,
                m: lit(&blocks[1]),
                v: lit(&blocks[2]),
            },
            model,
            best: h.best,
            history: h.history,
            class_draws: h.class_draws,
        })
    }
}

#[derive(Deserialize)]
struct CheckpointHeader {
    iteration: usize,
    seed: u64,
    optimizer_step: u64,
    optimizer_lr: f64,
    best: BestRecords,
    history: Vec<ValidationEvent>,
    class_draws: BTreeMap<u8, u64>,
}

/// Per-step diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    /// Batch-mean total loss.
    pub loss: f64,
    pub components: LossComponents,
    pub image_ids: Vec<u64>,
    pub timesteps: Vec<usize>,
    pub grad_norm: f64,
}

/// Dataset views, sampler and schedule shared by every step of a run.
#[derive(Debug, Clone)]
pub struct Trainer<'a, T> {
    dataset: &'a Dataset,
    setup: TrainSetup,
    sampler: ImageSampler,
    schedule: BetaSchedule<T>,
    annotations: BTreeMap<u64, Vec<Annotation>>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(dataset: &'a Dataset, setup: TrainSetup) -> Result<Self> {
        setup.train.validate()?;
        setup.loss.validate()?;
        setup.eval.validate()?;
        setup.model.validate()?;
        if dataset.split_ids(Split::Train).is_empty() || dataset.split_ids(Split::Validation).is_empty() {
            return Err(Error::arg("training needs nonempty train and validation splits"));
        }
        if let Some(img) = dataset.images.iter().find(|i| i.size() != setup.model.image_size) {
            return Err(Error::arg(format!(
                "image {} is {}x{} but the model is configured for {}x{}",
                img.image_id,
                img.width(),
                img.height(),
                setup.model.image_size.width,
                setup.model.image_size.height
            )));
        }
        let weights = if setup.train.balanced {
            balanced_weights(dataset)?
        } else {
            uniform_weights(dataset)?
        };
        let sampler = ImageSampler::new(weights)?;
        let schedule = setup.schedule.build()?;
        let annotations = dataset
            .annotations_by_image()
            .into_iter()
            .map(|(id, v)| (id, v.into_iter().cloned().collect()))
            .collect();
        Ok(Self {
            dataset,
            setup,
            sampler,
            schedule,
            annotations,
        })
    }

    pub fn setup(&self) -> &TrainSetup {
        &self.setup
    }

    pub fn sampler(&self) -> &ImageSampler {
        &self.sampler
    }

    /// Fresh model and optimizer for this setup.
    pub fn init_state(&self) -> Result<TrainState<T>> {
        let seed = self.setup.train.seed;
        let model = Model::new(self.setup.model.clone(), seed)?;
        Ok(TrainState::new(model, self.setup.train.optimizer(), seed))
    }

    fn image(&self, id: u64) -> Result<&ImageRecord> {
        self.dataset
            .image(id)
            .ok_or_else(|| Error::arg(format!("sampler drew unknown image {id}")))
    }

    /// One optimizer update on a freshly drawn batch; deterministic in `(seed, iteration)`.
    pub fn step(&self, state: &mut TrainState<T>) -> Result<StepStats> {
        let cfg = &self.setup.train;
        let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
        rng.set_stream(state.iteration as u64);
        let scaler = SignalScaler::new(self.setup.model.signal_scale)?;
        let s = T::lit(scaler.scale());
        let total_t = self.schedule.steps();

        let mut grads: Option<Grads<T>> = None;
        let mut components = LossComponents::default();
        let mut loss = 0.0;
        let mut image_ids = Vec::with_capacity(cfg.batch_size);
        let mut timesteps = Vec::with_capacity(cfg.batch_size);
        let mut failure = None;
        for _ in 0..cfg.batch_size {
            let (id, class) = self.sampler.draw(&mut rng);
            *state.class_draws.entry(class.id()).or_default() += 1;
            let flip = rng.random::<f64>() < cfg.flip_prob;
            let t = rng.random_range(1..=total_t);
            image_ids.push(id);
            timesteps.push(t);

            let image = self.image(id)?;
            let anns = self.annotations.get(&id).map(Vec::as_slice).unwrap_or_default();
            let flipped;
            let (image, anns) = if flip {
                flipped = horizontal_flip(image, anns)?;
                (&flipped.0, flipped.1.as_slice())
            } else {
                (image, anns)
            };
            let boxes: Vec<_> = anns.iter().map(|a| a.bbox).collect();
            let padded = pad_boxes::<T, _>(&boxes, cfg.proposals, image.size(), scaler, &mut rng)?;
            let gts: Vec<Annotation> = padded.kept.iter().map(|&i| anns[i].clone()).collect();
            let noise = Array2::from_shape_fn((cfg.proposals, 4), |_| T::lit(rng.sample::<f64, _>(StandardNormal)));
            let x0 = BoxState::new(padded.signal, 0)?;
            let mut xt = corrupt(&x0, t, noise.view(), &self.schedule)?;
            xt.boxes.mapv_inplace(|v| v.max(-s).min(s));

            if failure.is_some() {
                continue;
            }
            match image_objective(&state.model, image, &gts, &xt, &self.setup.loss, true) {
                Ok(obj) if obj.total.is_finite() => {
                    loss += obj.total;
                    components.add(&obj.components);
                    let g = obj.grads.expect("gradients requested");
                    match grads.as_mut() {
                        Some(acc) => acc.add(&g),
                        None => grads = Some(g),
                    }
                }
                Ok(obj) => failure = Some(obj.components.non_finite().unwrap_or("total").to_string()),
                Err(Error::NonFiniteLoss { component, .. }) => failure = Some(component),
                Err(e) => return Err(e),
            }
        }
        if let Some(component) = failure {
            return Err(Error::NonFiniteLoss {
                component,
                image_ids,
                timesteps,
            });
        }
        let inv = 1.0 / cfg.batch_size as f64;
        let mut grads = grads.expect("batch is nonempty");
        grads.scale(T::lit(inv));
        let norm = grads.norm().as_f64();
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                component: "gradient".into(),
                image_ids,
                timesteps,
            });
        }
        if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            grads.scale(T::lit(cfg.clip_norm / norm));
        }
        state.optimizer.config.lr = cfg.lr_at(state.iteration);
        state.optimizer.update(state.model.params_mut(), &grads);
        state.iteration += 1;
        components.scale(inv);
        Ok(StepStats {
            loss: loss * inv,
            components,
            image_ids,
            timesteps,
            grad_norm: norm,
        })
    }

    /// Box and mask APs on the validation split, without timing.
    pub fn validate(&self, model: &Model<T>) -> Result<(crate::eval::ApResult, crate::eval::ApResult)> {
        let predictor = Predictor::new(model, &self.setup.schedule, self.setup.eval)?;
        let images = self.dataset.split_images(Split::Validation);
        let preds = run_inference(&predictor, &images)?;
        let gts: Vec<Annotation> = images
            .iter()
            .flat_map(|i| self.annotations.get(&i.image_id).cloned().unwrap_or_default())
            .collect();
        Ok((
            compute_map(&preds, &gts, Task::BBox),
            compute_map(&preds, &gts, Task::Mask),
        ))
    }

    /// Runs from `state` up to the configured iteration count.
    ///
    /// With `out` set, every validation event rewrites `metrics.jsonl`, writes
    /// `ckpt_{iter}.bin`, and refreshes `best_model.bin` when box mAP improves.
    pub fn run(&self, mut state: TrainState<T>, out: Option<&Path>) -> Result<TrainOutcome<T>> {
        let cfg = &self.setup.train;
        let mut losses = Vec::new();
        let mut since_event = Vec::new();
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while state.iteration < cfg.iterations {
            let stats = self.step(&mut state)?;
            losses.push(stats.loss);
            since_event.push(stats.loss);
            if state.iteration.is_multiple_of(cfg.log_period) {
                self.log_frequencies(&state, out)?;
            }
            if state.iteration.is_multiple_of(cfg.eval_period) {
                let (bbox, mask) = self.validate(&state.model)?;
                let event = ValidationEvent {
                    iteration: state.iteration,
                    bbox_ap: bbox.per_class_ap,
                    mask_ap: mask.per_class_ap,
                    map_bbox: bbox.map,
                    map_mask: mask.map,
                    train_loss: since_event.iter().sum::<f64>() / since_event.len() as f64,
                };
                since_event.clear();
                log::info!(
                    "iteration {}: bbox mAP {:.4}, mask mAP {:.4}, loss {:.4}",
                    event.iteration,
                    event.map_bbox,
                    event.map_mask,
                    event.train_loss
                );
                let improved = state.best.update(&event);
                state.history.push(event);
                if let Some(dir) = out {
                    write_metrics(&dir.join(METRICS_FILE), &state.history)?;
                    state.save(&checkpoint_path(dir, state.iteration))?;
                    if improved {
                        state.model.save(&dir.join(BEST_MODEL_FILE))?;
                    }
                }
            }
        }
        Ok(TrainOutcome { state, losses })
    }

    fn log_frequencies(&self, state: &TrainState<T>, out: Option<&Path>) -> Result<()> {
        let total: u64 = state.class_draws.values().sum();
        let freq: BTreeMap<u8, f64> = state
            .class_draws
            .iter()
            .map(|(&c, &n)| (c, n as f64 / total.max(1) as f64))
            .collect();
        log::info!("iteration {}: sampled class frequencies {freq:?}", state.iteration);
        if let Some(dir) = out {
            let path = dir.join(SAMPLER_LOG_FILE);
            let line = json!({"iteration": state.iteration, "frequencies": freq, "draws": total});
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SAMPLER_LOG_FILE: &str = "sampler.jsonl";
pub const BEST_MODEL_FILE: &str = "best_model.bin";

pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("ckpt_{iteration}.bin"))
}

/// Highest-iteration `ckpt_{iter}.bin` in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(iter) = name
            .strip_prefix("ckpt_")
            .and_then(|r| r.strip_suffix(".bin"))
            .and_then(|r| r.parse::<usize>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| iter > *b) {
            best = Some((iter, path));
        }
    }
    Ok(best.map(|(_, p)| p))
}

pub fn write_metrics(path: &Path, history: &[ValidationEvent]) -> Result<()> {
    let mut text = String::new();
    for e in history {
        text.push_str(&serde_json::to_string(e).expect("event serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<ValidationEvent>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Load {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
    /// Batch-mean loss of every step run in this call.
    pub losses: Vec<f64>,
}

/// Single optimizer step; see [`Trainer::step`].
pub fn train_step<T: Scalar>(trainer: &Trainer<'_, T>, state: &mut TrainState<T>) -> Result<StepStats> {
    trainer.step(state)
}

/// Trains from scratch, or continues from the newest checkpoint in `out` when `resume` is set.
pub fn train_loop<T: Scalar>(
    dataset: &Dataset,
    setup: TrainSetup,
    out: Option<&Path>,
    resume: bool,
) -> Result<TrainOutcome<T>> {
    let trainer = Trainer::new(dataset, setup)?;
    let state = match out.filter(|_| resume).map(latest_checkpoint).transpose()?.flatten() {
        Some(path) => {
            log::info!("resuming from {}", path.display());
            let state = TrainState::load(&path, trainer.setup.train.optimizer())?;
            let expected = ModelConfig {
                backbone_weights: None,
                ..trainer.setup.model.clone()
            };
            if state.model.config() != &expected {
                return Err(Error::Load {
                    path,
                    reason: "checkpoint model configuration differs from the run configuration".into(),
                });
            }
            state
        }
        None => trainer.init_state()?,
    };
    trainer.run(state, out)
}
