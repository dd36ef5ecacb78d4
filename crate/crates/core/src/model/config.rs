use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ImageSize;

/// Registered feature extractors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BackboneKind {
    /// Four-stage residual CNN trained from scratch.
    #[default]
    TinyCnn,
    ResNet50,
    ResNet101,
    Swin,
}

impl BackboneKind {
    pub fn needs_weights(self) -> bool {
        !matches!(self, BackboneKind::TinyCnn)
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny-cnn" => Ok(Self::TinyCnn),
            "resnet50" => Ok(Self::ResNet50),
            "resnet101" => Ok(Self::ResNet101),
            "swin" => Ok(Self::Swin),
            other => Err(Error::Config(format!("unregistered backbone `{other}`"))),
        }
    }
}

impl TryFrom<String> for BackboneKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BackboneKind> for String {
    fn from(k: BackboneKind) -> String {
        k.to_string()
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TinyCnn => "tiny-cnn",
            Self::ResNet50 => "resnet50",
            Self::ResNet101 => "resnet101",
            Self::Swin => "swin",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: ImageSize,
    pub backbone: BackboneKind,
    pub backbone_weights: Option<PathBuf>,
    /// Stem width followed by the four stage widths.
    pub backbone_channels: Vec<usize>,
    /// Shared channel count of the pyramid levels after lateral projection.
    pub fpn_channels: usize,
    pub mask_channels: usize,
    pub mask_hidden: Vec<usize>,
    pub mask_threshold: f64,
    pub fusion_stride: usize,
    pub head_hidden: usize,
    pub pool_size: usize,
    pub time_dim: usize,
    /// Number of cascaded refinement stages inside one head pass.
    pub head_stages: usize,
    /// Pooling window relative to the box size.
    pub roi_context: f64,
    pub signal_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: ImageSize::square(480),
            backbone: BackboneKind::TinyCnn,
            backbone_weights: None,
            backbone_channels: vec![8, 16, 32, 32, 32],
            fpn_channels: 16,
            mask_channels: 8,
            mask_hidden: vec![8, 8],
            mask_threshold: 0.5,
            fusion_stride: 8,
            head_hidden: 64,
            pool_size: 7,
            time_dim: 32,
            head_stages: 2,
            roi_context: 1.0,
            signal_scale: 2.0,
        }
    }
}

impl ModelConfig {
    pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.backbone_channels.len() != 5 || self.backbone_channels.contains(&0) {
            return bad("backbone channels need a stem width and four positive stage widths".into());
        }
        if self.image_size.width == 0 || self.image_size.height == 0 {
            return bad("image size must be positive".into());
        }
        if ![1, 2, 4, 8, 16, 32].contains(&self.fusion_stride) {
            return bad(format!(
                "fusion stride {} must be a power of two up to 32",
                self.fusion_stride
            ));
        }
        if self.fpn_channels == 0 || self.mask_channels == 0 || self.head_hidden == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.pool_size == 0 || self.head_stages == 0 {
            return bad("pool size and head stages must be positive".into());
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return bad("time embedding width must be even and at least 2".into());
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return bad("mask threshold must be in (0, 1)".into());
        }
        if !(self.roi_context >= 1.0 && self.roi_context.is_finite()) {
            return bad("roi context must be at least 1".into());
        }
        if self.backbone.needs_weights() && self.backbone_weights.is_none() {
            return bad(format!("backbone `{}` requires backbone.weights", self.backbone));
        }
        Ok(())
    }

    /// Spatial size of a level at `stride` (ceiling division).
    pub fn level_hw(&self, stride: usize) -> (usize, usize) {
        (
            self.image_size.height.div_ceil(stride),
            self.image_size.width.div_ceil(stride),
        )
    }

    pub fn fused_hw(&self) -> (usize, usize) {
        self.level_hw(self.fusion_stride)
    }
}
