//! Noise schedules and the deterministic DDIM step maps.
//!
//! `alpha_bar[t]` is the cumulative product `Π_{s≤t} (1 − β_s)`; the forward
//! marginal `x_t = √ᾱ_t x_0 + √(1 − ᾱ_t) ε` only holds for the cumulative
//! value, so every step rule below reads its "α" from `alpha_bar`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::LatentGrid;

pub const DEFAULT_TOTAL_STEPS: usize = 1000;
pub const DEFAULT_INFERENCE_STEPS: usize = 50;

const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 2e-2;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    LinearBeta,
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    total: usize,
    alpha_bar: Vec<f64>,
    kind: ScheduleKind,
}

impl NoiseSchedule {
    pub fn new(total: usize, kind: ScheduleKind) -> Result<Self> {
        make_schedule(total, kind)
    }

    /// Number of diffusion timesteps `T`.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.total {
            return Err(Error::invalid(format!(
                "timestep {t} outside schedule range [0, {}]",
                self.total
            )));
        }
        Ok(())
    }
}

/// Builds a schedule with `T` steps. Linear-beta spaces `β_t` evenly over
/// `[1e-4, 2e-2]` across the `T` steps; cosine follows the shifted-cosine
/// `ᾱ` curve with per-step `β` clipped at 0.999 so `ᾱ_T` stays positive.
///
/// The terminal value `ᾱ_T < 0.05` is reached for linear-beta once `T ≳ 300`;
/// shorter chains keep more signal at `T`.
pub fn make_schedule(total: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if total == 0 {
        return Err(Error::invalid("schedule needs T >= 1"));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::LinearBeta => (0..total)
            .map(|i| {
                if total == 1 {
                    BETA_START
                } else {
                    BETA_START + (BETA_END - BETA_START) * i as f64 / (total - 1) as f64
                }
            })
            .collect(),
        ScheduleKind::Cosine => {
            let f = |t: usize| {
                let u = (t as f64 / total as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
            };
            (1..=total)
                .map(|t| (1.0 - f(t) / f(t - 1)).clamp(1e-8, MAX_BETA))
                .collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(total + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for b in betas {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        total,
        alpha_bar,
        kind,
    })
}

/// The timesteps visited by a DDIM run, strictly increasing, ending at `T`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepIndexMap {
    timesteps: Vec<usize>,
}

impl StepIndexMap {
    /// Uniform stride: `t_k = ⌊k·T / steps⌋` for `k = 1..=steps`.
    pub fn uniform(total: usize, steps: usize) -> Result<Self> {
        if steps > total {
            return Err(Error::invalid(format!(
                "cannot take {steps} inference steps over a {total}-step schedule"
            )));
        }
        Ok(Self {
            timesteps: (1..=steps).map(|k| k * total / steps).collect(),
        })
    }

    pub fn from_timesteps(timesteps: Vec<usize>) -> Result<Self> {
        if timesteps.first() == Some(&0) {
            return Err(Error::invalid("first inference timestep must be > 0"));
        }
        if timesteps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("inference timesteps must be strictly increasing"));
        }
        Ok(Self { timesteps })
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// Timestep at position `k` where position 0 is the clean sample (`t = 0`).
    pub fn at(&self, k: usize) -> usize {
        if k == 0 {
            0
        } else {
            self.timesteps[k - 1]
        }
    }

    /// `(t, t_prev)` pairs in denoising order, from `T` down to `0`.
    pub fn denoise_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (1..=self.len()).rev().map(move |k| (self.at(k), self.at(k - 1)))
    }
}

/// `x_t = √ᾱ_t x_0 + √(1 − ᾱ_t) ε`
pub fn ddpm_forward(
    x0: &LatentGrid,
    t: usize,
    eps: &LatentGrid,
    sched: &NoiseSchedule,
) -> Result<LatentGrid> {
    sched.check_t(t)?;
    x0.check_same_shape(eps, "ddpm_forward")?;
    if t == 0 {
        return Ok(x0.clone());
    }
    let a = sched.alpha_bar(t);
    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
    x0.zip_map(eps, |x, e| sa * x + sb * e)
}

/// Clean-sample estimate `(x_t − √(1 − ᾱ_t) ε) / √ᾱ_t`.
pub fn predict_x0(x_t: &LatentGrid, eps: &LatentGrid, t: usize, sched: &NoiseSchedule) -> Result<LatentGrid> {
    sched.check_t(t)?;
    let a = sched.alpha_bar(t);
    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
    x_t.zip_map(eps, |x, e| (x - sb * e) / sa)
}

/// Shared DDIM map from noise level `from` to noise level `to` with σ = 0.
fn ddim_transfer(
    x: &LatentGrid,
    eps: &LatentGrid,
    from: usize,
    to: usize,
    sched: &NoiseSchedule,
) -> Result<LatentGrid> {
    x.check_same_shape(eps, "ddim step")?;
    let (a_from, a_to) = (sched.alpha_bar(from), sched.alpha_bar(to));
    let (s_from, n_from) = (a_from.sqrt(), (1.0 - a_from).sqrt());
    let (s_to, n_to) = (a_to.sqrt(), (1.0 - a_to).sqrt());
    let out = x.zip_map(eps, |x, e| s_to * ((x - n_from * e) / s_from) + n_to * e)?;
    out.ensure_finite("ddim step")?;
    Ok(out)
}

/// One inversion step toward higher noise, from `t` to `t_next > t`.
pub fn ddim_invert_step(
    x_t: &LatentGrid,
    eps_hat: &LatentGrid,
    t: usize,
    t_next: usize,
    sched: &NoiseSchedule,
) -> Result<LatentGrid> {
    sched.check_t(t)?;
    sched.check_t(t_next)?;
    if t_next <= t {
        return Err(Error::invalid(format!(
            "ddim_invert_step needs t_next > t, got t={t}, t_next={t_next}"
        )));
    }
    ddim_transfer(x_t, eps_hat, t, t_next, sched)
}

/// One deterministic denoising step from `t` to `t_prev < t`.
pub fn ddim_denoise_step(
    x_t: &LatentGrid,
    eps_hat: &LatentGrid,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<LatentGrid> {
    sched.check_t(t)?;
    sched.check_t(t_prev)?;
    if t_prev >= t {
        return Err(Error::invalid(format!(
            "ddim_denoise_step needs t_prev < t, got t={t}, t_prev={t_prev}"
        )));
    }
    ddim_transfer(x_t, eps_hat, t, t_prev, sched)
}
