//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use diffinspect::diffusion::{ScheduleConfig, ScheduleKind};
use diffinspect::eval::InferenceConfig;
use diffinspect::model::{BackboneKind, ModelConfig};
use diffinspect::train::{LossConfig, Matcher, TrainConfig, TrainSetup};
use diffinspect::{Error, ImageSize, Result};

pub const SEED_ENV: &str = "DIFFINSPECT_SEED";
pub const ECHO_FILE: &str = "config.resolved";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(Error::Config(format!("precision must be f32 or f64, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        })
    }
}

/// Every knob of a run, with defaults filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Directory holding `annotations.json`, `split.json` and `images/`.
    pub dataset: Option<PathBuf>,
    pub precision: Precision,
    pub setup: TrainSetup,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            dataset: None,
            precision: Precision::default(),
            setup: TrainSetup::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{v}`: {e}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn path_or_none(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl RunConfig {
    /// Defaults, with the global seed taken from the environment when set.
    pub fn with_env() -> Result<Self> {
        let mut c = Self::default();
        if let Ok(v) = std::env::var(SEED_ENV) {
            c.set("seed", v.trim())?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut c = Self::with_env()?;
        c.apply_text(&text)?;
        Ok(c)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if let Some(prev) = seen.insert(k.to_string(), n + 1) {
                return Err(Error::Config(format!(
                    "line {}: `{k}` already set on line {prev}",
                    n + 1
                )));
            }
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(&e))))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.setup;
        let m = &mut s.model;
        let t = &mut s.train;
        let l = &mut s.loss;
        let sc = &mut s.schedule;
        let inf = &mut s.eval;
        match key {
            "seed" => {
                self.seed = parse(key, v)?;
                t.seed = self.seed;
                inf.seed = self.seed;
            }
            "out" => self.out = PathBuf::from(v),
            "dataset" => self.dataset = path_or_none(v),
            "precision" => self.precision = parse(key, v)?,

            "schedule.kind" => sc.kind = parse::<ScheduleKind>(key, v)?,
            "schedule.T" => sc.steps = parse(key, v)?,
            "schedule.beta_start" => sc.beta_start = parse(key, v)?,
            "schedule.beta_end" => sc.beta_end = parse(key, v)?,
            "signal.scale" => m.signal_scale = parse(key, v)?,
            "boxes.train" => t.proposals = parse(key, v)?,
            "boxes.infer" => inf.n_boxes = parse(key, v)?,
            "sampler.steps" => inf.steps = parse(key, v)?,
            "sampler.eta" => inf.eta = parse(key, v)?,
            "sampler.balanced" => t.balanced = parse(key, v)?,

            "backbone.name" => m.backbone = parse::<BackboneKind>(key, v)?,
            "backbone.weights" => m.backbone_weights = path_or_none(v),
            "backbone.channels" => m.backbone_channels = parse_list(key, v)?,
            "model.image_size" => m.image_size = ImageSize::square(parse(key, v)?),
            "model.fpn_channels" => m.fpn_channels = parse(key, v)?,
            "model.fusion_stride" => m.fusion_stride = parse(key, v)?,
            "model.head_hidden" => m.head_hidden = parse(key, v)?,
            "model.head_stages" => m.head_stages = parse(key, v)?,
            "model.pool_size" => m.pool_size = parse(key, v)?,
            "model.time_dim" => m.time_dim = parse(key, v)?,
            "model.roi_context" => m.roi_context = parse(key, v)?,
            "mask.channels" => {
                let layers = m.mask_hidden.len() + 1;
                m.mask_channels = parse(key, v)?;
                m.mask_hidden = vec![m.mask_channels; layers - 1];
            }
            "mask.layers" => {
                let n: usize = parse(key, v)?;
                if n == 0 {
                    return Err(Error::Config("`mask.layers` must be at least 1".into()));
                }
                m.mask_hidden = vec![m.mask_channels; n - 1];
            }
            "mask.threshold" => m.mask_threshold = parse(key, v)?,

            "train.iterations" => t.iterations = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.eval_period" => t.eval_period = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.flip_prob" => t.flip_prob = parse(key, v)?,
            "train.clip_norm" => t.clip_norm = parse(key, v)?,
            "train.log_period" => t.log_period = parse(key, v)?,
            "train.warmup_iters" => t.warmup_iters = parse(key, v)?,
            "train.decay_steps" => t.decay_steps = parse_list(key, v)?,
            "train.decay_factor" => t.decay_factor = parse(key, v)?,

            "loss.w_cls" => l.w_cls = parse(key, v)?,
            "loss.w_l1" => l.w_l1 = parse(key, v)?,
            "loss.w_giou" => l.w_giou = parse(key, v)?,
            "loss.w_mask" => l.w_mask = parse(key, v)?,
            "loss.alpha" => l.alpha = parse(key, v)?,
            "loss.gamma" => l.gamma = parse(key, v)?,
            "loss.matcher" => l.matcher = parse::<Matcher>(key, v)?,

            "infer.seed" => inf.seed = parse(key, v)?,
            "infer.suppression" => inf.suppression = parse(key, v)?,
            "infer.nms_iou" => inf.nms_iou = parse(key, v)?,
            "infer.score_threshold" => inf.score_threshold = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.setup;
        let (m, t, l, sc, inf) = (&s.model, &s.train, &s.loss, &s.schedule, &s.eval);
        vec![
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("dataset", show_path(&self.dataset)),
            ("precision", self.precision.to_string()),
            ("schedule.kind", sc.kind.to_string()),
            ("schedule.T", sc.steps.to_string()),
            ("schedule.beta_start", sc.beta_start.to_string()),
            ("schedule.beta_end", sc.beta_end.to_string()),
            ("signal.scale", m.signal_scale.to_string()),
            ("boxes.train", t.proposals.to_string()),
            ("boxes.infer", inf.n_boxes.to_string()),
            ("sampler.steps", inf.steps.to_string()),
            ("sampler.eta", inf.eta.to_string()),
            ("sampler.balanced", t.balanced.to_string()),
            ("backbone.name", m.backbone.to_string()),
            ("backbone.weights", show_path(&m.backbone_weights)),
            ("backbone.channels", join(&m.backbone_channels)),
            ("model.image_size", m.image_size.width.to_string()),
            ("model.fpn_channels", m.fpn_channels.to_string()),
            ("model.fusion_stride", m.fusion_stride.to_string()),
            ("model.head_hidden", m.head_hidden.to_string()),
            ("model.head_stages", m.head_stages.to_string()),
            ("model.pool_size", m.pool_size.to_string()),
            ("model.time_dim", m.time_dim.to_string()),
            ("model.roi_context", m.roi_context.to_string()),
            ("mask.channels", m.mask_channels.to_string()),
            ("mask.layers", (m.mask_hidden.len() + 1).to_string()),
            ("mask.threshold", m.mask_threshold.to_string()),
            ("train.iterations", t.iterations.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.eval_period", t.eval_period.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.flip_prob", t.flip_prob.to_string()),
            ("train.clip_norm", t.clip_norm.to_string()),
            ("train.log_period", t.log_period.to_string()),
            ("train.warmup_iters", t.warmup_iters.to_string()),
            ("train.decay_steps", join(&t.decay_steps)),
            ("train.decay_factor", t.decay_factor.to_string()),
            ("loss.w_cls", l.w_cls.to_string()),
            ("loss.w_l1", l.w_l1.to_string()),
            ("loss.w_giou", l.w_giou.to_string()),
            ("loss.w_mask", l.w_mask.to_string()),
            ("loss.alpha", l.alpha.to_string()),
            ("loss.gamma", l.gamma.to_string()),
            ("loss.matcher", l.matcher.to_string()),
            ("infer.seed", inf.seed.to_string()),
            ("infer.suppression", inf.suppression.to_string()),
            ("infer.nms_iou", inf.nms_iou.to_string()),
            ("infer.score_threshold", inf.score_threshold.to_string()),
        ]
    }

    /// Text form that parses back to the same configuration.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Writes the resolved config into `dir`.
    pub fn write_echo(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let path = dir.join(ECHO_FILE);
        std::fs::write(&path, self.echo()).map_err(|e| io(&path, e))?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.setup.model.validate()?;
        self.setup.train.validate()?;
        self.setup.loss.validate()?;
        self.setup.eval.validate()?;
        self.setup.schedule.build::<f64>()?;
        Ok(())
    }

    pub fn model(&self) -> &ModelConfig {
        &self.setup.model
    }

    pub fn train(&self) -> &TrainConfig {
        &self.setup.train
    }

    pub fn loss(&self) -> &LossConfig {
        &self.setup.loss
    }

    pub fn schedule(&self) -> &ScheduleConfig {
        &self.setup.schedule
    }

    pub fn inference(&self) -> &InferenceConfig {
        &self.setup.eval
    }
}

pub(crate) fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
