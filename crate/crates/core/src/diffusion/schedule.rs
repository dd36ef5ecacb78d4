use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Cosine => "cosine",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build<T: Scalar>(&self) -> Result<BetaSchedule<T>> {
        match self.kind {
            ScheduleKind::Linear => BetaSchedule::linear(self.steps, self.beta_start, self.beta_end),
            ScheduleKind::Cosine => BetaSchedule::cosine(self.steps),
        }
    }
}

/// Noise variances `β_1..β_T` with the cached cumulative products `ᾱ_t = Π_{i≤t}(1-β_i)`.
///
/// Index `t` is 1-based everywhere in the public API; `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaSchedule<T> {
    betas: Vec<T>,
    alpha_bars: Vec<T>,
}

/// Builds a schedule of the given kind with the default parameters.
pub fn make_schedule<T: Scalar>(kind: ScheduleKind, steps: usize) -> Result<BetaSchedule<T>> {
    ScheduleConfig {
        kind,
        steps,
        ..Default::default()
    }
    .build()
}

impl<T: Scalar> BetaSchedule<T> {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::arg("schedule needs at least one step"));
        }
        let betas = (0..steps)
            .map(|i| {
                let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                T::lit(beta_start + (beta_end - beta_start) * frac)
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Squared-cosine `ᾱ` curve with offset 0.008, betas clipped to 0.999.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 1 {
            return Err(Error::arg("schedule needs at least one step"));
        }
        let offset = 0.008;
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let betas = (1..=steps)
            .map(|t| T::lit((1.0 - f(t) / f(t - 1)).min(0.999)))
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<T>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::arg("schedule needs at least one step"));
        }
        if let Some((i, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, &b)| !(b > T::zero() && b < T::one()))
        {
            return Err(Error::arg(format!("beta_{} = {b} outside (0, 1)", i + 1)));
        }
        Ok(Self::from_betas_unchecked(betas))
    }

    /// Skips the `0 < β < 1` check. Only meant for degenerate test schedules such as `β ≡ 0`.
    #[doc(hidden)]
    pub fn from_betas_unchecked(betas: Vec<T>) -> Self {
        let mut running = T::one();
        let alpha_bars = betas
            .iter()
            .map(|&b| {
                running *= T::one() - b;
                running
            })
            .collect();
        Self { betas, alpha_bars }
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[T] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> Result<T> {
        self.check_step(t, 1)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<T> {
        self.check_step(t, 0)?;
        Ok(if t == 0 { T::one() } else { self.alpha_bars[t - 1] })
    }

    fn check_step(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            Err(Error::arg(format!("timestep {t} outside {lo}..={}", self.steps())))
        } else {
            Ok(())
        }
    }
}
