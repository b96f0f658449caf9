//! Diffusion variance schedule and timestep-subsequence planning.
//!
//! Indexing convention used throughout the crate: the schedule tables are
//! 1-based in the diffusion sense (`beta(t)`, `alpha(t)`, `alpha_bar(t)` for
//! `t in 1..=T`, with `alpha_bar(0) == 1` so that t = 0 means "no noise").
//! Sampler plans and network timestep inputs use 0-based indices
//! `tau in 0..T`; a plan entry `tau` carries the noise level
//! `alpha_bar(tau + 1)`, and the terminal DDIM target `tau_prev = -1` maps to
//! `alpha_bar(0) == 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Precomputed variance schedule over `T` diffusion steps.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_max: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// How inference timesteps are spread over the training range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    Leading,
    Trailing,
}

impl std::fmt::Display for Spacing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Spacing::Leading => write!(f, "leading"),
            Spacing::Trailing => write!(f, "trailing"),
        }
    }
}

impl std::str::FromStr for Spacing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leading" => Ok(Spacing::Leading),
            "trailing" => Ok(Spacing::Trailing),
            other => Err(Error::parameter(format!("unknown spacing `{other}`"))),
        }
    }
}

/// A descending subsequence of network timesteps in `[0, T-1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepPlan {
    pub spacing: Spacing,
    pub steps: Vec<usize>,
}

/// Linear beta schedule from `beta_start` to `beta_end` inclusive.
pub fn build_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::parameter(format!("T must be >= 1, got {t_max}")));
    }
    if !(beta_start > 0.0) {
        return Err(Error::parameter(format!(
            "beta_start must be > 0, got {beta_start}"
        )));
    }
    if !(beta_end < 1.0) {
        return Err(Error::parameter(format!(
            "beta_end must be < 1, got {beta_end}"
        )));
    }
    if beta_start > beta_end {
        return Err(Error::parameter(format!(
            "beta_start {beta_start} exceeds beta_end {beta_end}"
        )));
    }

    let betas: Vec<f64> = if t_max == 1 {
        vec![beta_start]
    } else {
        (0..t_max)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64)
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule { t_max, betas, alphas, alpha_bars })
}

impl NoiseSchedule {
    /// Total number of diffusion steps `T`.
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// `beta_t` for `t in 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "beta index {t} out of 1..={}", self.t_max);
        self.betas[t - 1]
    }

    /// `alpha_t = 1 - beta_t` for `t in 1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "alpha index {t} out of 1..={}", self.t_max);
        self.alphas[t - 1]
    }

    /// Cumulative `alpha_bar_t` for `t in 0..=T`, with `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_max, "alpha_bar index {t} out of 0..={}", self.t_max);
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `alpha_bar` addressed by 0-based network timestep, extended so that
    /// `tau = -1` denotes the clean endpoint (`alpha_bar == 1`).
    pub fn alpha_bar_at(&self, tau: i64) -> f64 {
        assert!(tau >= -1 && tau < self.t_max as i64, "tau {tau} out of range");
        self.alpha_bar((tau + 1) as usize)
    }
}

/// Choose `s` inference timesteps out of `T` training steps.
///
/// Trailing anchors the plan at the maximal timestep `T-1` so a single-step
/// plan denoises from pure noise; leading anchors at 0.
pub fn plan_timesteps(schedule: &NoiseSchedule, s: usize, spacing: Spacing) -> Result<TimestepPlan> {
    let t_max = schedule.t_max();
    if s < 1 || s > t_max {
        return Err(Error::parameter(format!(
            "step count S={s} must be in 1..={t_max}"
        )));
    }
    let steps: Vec<usize> = match spacing {
        // steps_i = ceil(T*(S-i)/S) - 1
        Spacing::Trailing => (0..s)
            .map(|i| (t_max * (s - i)).div_ceil(s) - 1)
            .collect(),
        // steps_i = floor(T*(S-1-i)/S)
        Spacing::Leading => (0..s).map(|i| t_max * (s - 1 - i) / s).collect(),
    };
    debug_assert!(steps.windows(2).all(|w| w[0] > w[1]));
    Ok(TimestepPlan { spacing, steps })
}
