//! Regularized DDIM inversion.
//!
//! Every inversion step predicts the noise at the current latent, pushes the
//! prediction toward an i.i.d. standard normal with a few descent steps on
//! `λ (L_pair + L_KL)`, and then steps the latent up the noise schedule. The
//! regularized predictions are stored so that reconstruction can replay them.

use serde::{Deserialize, Serialize};

use crate::denoiser::{PromptSpec, ToyWorld};
use crate::error::{Error, Result};
use crate::numerics::{check_pyramid_dims, max_pool_2x2, mean_var, LatentGrid};
use crate::schedule::{ddim_denoise_step, ddim_invert_step, NoiseSchedule, StepIndexMap};

/// Halvings tried before a descent step is abandoned.
const MAX_BACKTRACK: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub lambda_reg: f64,
    pub levels: usize,
    pub steps: usize,
    pub step_size: f64,
    pub epsilon_stab: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 20.0,
            levels: 4,
            steps: 3,
            step_size: 0.05,
            epsilon_stab: 1e-8,
        }
    }
}

impl RegConfig {
    /// No regularization at all.
    pub fn disabled() -> Self {
        Self {
            lambda_reg: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_reg >= 0.0) || !self.lambda_reg.is_finite() {
            return Err(Error::invalid(format!("lambda_reg must be >= 0, got {}", self.lambda_reg)));
        }
        if self.levels == 0 {
            return Err(Error::invalid("pyramid levels must be positive"));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::invalid(format!("reg step size must be > 0, got {}", self.step_size)));
        }
        if !(self.epsilon_stab > 0.0) {
            return Err(Error::invalid("epsilon_stab must be > 0"));
        }
        Ok(())
    }

    fn is_active(&self) -> bool {
        self.lambda_reg > 0.0 && self.steps > 0
    }
}

/// The pairwise long-range correlation penalty over a max-pool pyramid.
///
/// Offsets wrap around, so `Σ_{δ=1}^{W−1} η_{x−δ}` is the row sum minus `η`
/// itself. Each level is normalized by its pixel count.
pub fn l_pair(eps_hat: &LatentGrid, levels: usize) -> Result<f64> {
    check_pyramid_dims(eps_hat, levels)?;
    let mut total = 0.0;
    let mut level = eps_hat.clone();
    for p in 0..levels {
        if p > 0 {
            level = max_pool_2x2(&level).0;
        }
        total += level_pair(&level);
    }
    Ok(total)
}

fn line_sums(g: &LatentGrid) -> (Vec<f64>, Vec<f64>) {
    let (h, w, c) = g.shape();
    let mut rows = vec![0.0; h * c];
    let mut cols = vec![0.0; w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = g.get(y, x, ch);
                rows[y * c + ch] += v;
                cols[x * c + ch] += v;
            }
        }
    }
    (rows, cols)
}

fn level_pair(g: &LatentGrid) -> f64 {
    let (h, w, c) = g.shape();
    let (rows, cols) = line_sums(g);
    let mut acc = 0.0;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = g.get(y, x, ch);
                acc += v * (rows[y * c + ch] - v + cols[x * c + ch] - v);
            }
        }
    }
    acc / (h * w) as f64
}

fn level_pair_grad(g: &LatentGrid) -> LatentGrid {
    let (h, w, c) = g.shape();
    let (rows, cols) = line_sums(g);
    let norm = (h * w) as f64;
    LatentGrid::from_fn(h, w, c, |y, x, ch| {
        2.0 * (rows[y * c + ch] + cols[x * c + ch] - 2.0 * g.get(y, x, ch)) / norm
    })
}

/// Gradient of [`l_pair`] with respect to the finest level. Pooled levels
/// pass their gradient to the entry that won each 2×2 block.
pub fn l_pair_grad(eps_hat: &LatentGrid, levels: usize) -> Result<LatentGrid> {
    check_pyramid_dims(eps_hat, levels)?;
    let mut grids = vec![eps_hat.clone()];
    let mut winners = Vec::with_capacity(levels.saturating_sub(1));
    for _ in 1..levels {
        let (next, win) = max_pool_2x2(grids.last().expect("non-empty"));
        grids.push(next);
        winners.push(win);
    }
    let mut grad = level_pair_grad(&grids[levels - 1]);
    for p in (1..levels).rev() {
        let mut below = level_pair_grad(&grids[p - 1]);
        let slice = below.as_mut_slice();
        for (o, &src) in winners[p - 1].iter().enumerate() {
            slice[src] += grad.as_slice()[o];
        }
        grad = below;
    }
    Ok(grad)
}

/// `σ² + μ² − 1 − ln(σ² + ε)` over all entries.
pub fn l_kl(eps_hat: &LatentGrid, epsilon_stab: f64) -> f64 {
    let (mu, var) = mean_var(eps_hat);
    var + mu * mu - 1.0 - (var + epsilon_stab).ln()
}

pub fn l_kl_grad(eps_hat: &LatentGrid, epsilon_stab: f64) -> LatentGrid {
    let (mu, var) = mean_var(eps_hat);
    let n = eps_hat.len() as f64;
    let k = 1.0 - 1.0 / (var + epsilon_stab);
    eps_hat.map(|v| 2.0 * (v - mu) / n * k + 2.0 * mu / n)
}

fn reg_objective(eta: &LatentGrid, cfg: &RegConfig) -> Result<f64> {
    Ok(cfg.lambda_reg * (l_pair(eta, cfg.levels)? + l_kl(eta, cfg.epsilon_stab)))
}

/// Descends `λ (L_pair + L_KL)` on the noise map itself.
pub fn regularize_noise(eps_hat: &LatentGrid, cfg: &RegConfig) -> Result<LatentGrid> {
    Ok(regularize_noise_traced(eps_hat, cfg)?.0)
}

/// Like [`regularize_noise`], also returning the objective before the first
/// step and after every step.
///
/// A step that would raise the objective is halved until it does not; if no
/// such step exists within the backtracking budget the map is left as is.
pub fn regularize_noise_traced(eps_hat: &LatentGrid, cfg: &RegConfig) -> Result<(LatentGrid, Vec<f64>)> {
    cfg.validate()?;
    if !cfg.is_active() {
        return Ok((eps_hat.clone(), Vec::new()));
    }
    let mut eta = eps_hat.clone();
    let mut j = reg_objective(&eta, cfg)?;
    let mut history = vec![j];
    for _ in 0..cfg.steps {
        let mut grad = l_pair_grad(&eta, cfg.levels)?;
        grad.axpy(1.0, &l_kl_grad(&eta, cfg.epsilon_stab))?;
        grad.ensure_finite("regularization gradient")?;
        let mut step = cfg.step_size * cfg.lambda_reg;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACK {
            let mut cand = eta.clone();
            cand.axpy(-step, &grad)?;
            let jc = reg_objective(&cand, cfg)?;
            if jc.is_finite() && jc <= j {
                accepted = Some((cand, jc));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((cand, jc)) => {
                eta = cand;
                j = jc;
                history.push(j);
            }
            None => break,
        }
    }
    Ok((eta, history))
}

/// Latents and regularized noise predictions of one inversion run.
#[derive(Clone, Debug, PartialEq)]
pub struct InversionTrace {
    /// `latents[k]` is the latent at `timesteps.at(k)`; the last one is `x_inv`.
    pub latents: Vec<LatentGrid>,
    /// `eps_hats[k]` carried `latents[k]` to `latents[k + 1]`.
    pub eps_hats: Vec<LatentGrid>,
    pub timesteps: StepIndexMap,
    pub source: PromptSpec,
}

impl InversionTrace {
    pub fn x0(&self) -> &LatentGrid {
        &self.latents[0]
    }

    pub fn x_inv(&self) -> &LatentGrid {
        self.latents.last().expect("trace holds x0")
    }

    pub fn steps(&self) -> usize {
        self.eps_hats.len()
    }

    /// Latent stored for timestep `t`, if the trace visited it.
    pub fn latent_at(&self, t: usize) -> Option<&LatentGrid> {
        if t == 0 {
            return self.latents.first();
        }
        let k = self.timesteps.timesteps().iter().position(|&v| v == t)?;
        self.latents.get(k + 1)
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        let n = self.timesteps.len();
        if self.latents.len() != n + 1 || self.eps_hats.len() != n {
            return Err(Error::invalid(format!(
                "trace has {} latents and {} noise maps for {n} steps",
                self.latents.len(),
                self.eps_hats.len()
            )));
        }
        if self.timesteps.timesteps().last().is_some_and(|&t| t > sched.total()) {
            return Err(Error::invalid("trace timesteps exceed the schedule length"));
        }
        let shape = self.latents[0].shape();
        if self.latents.iter().chain(&self.eps_hats).any(|g| g.shape() != shape) {
            return Err(Error::invalid("trace grids disagree in shape"));
        }
        Ok(())
    }

    /// Walks back down with the stored noise maps.
    pub fn replay_down(&self, sched: &NoiseSchedule) -> Result<LatentGrid> {
        let mut x = self.x_inv().clone();
        for (k, (t, t_prev)) in self.timesteps.denoise_pairs().enumerate() {
            let eps = &self.eps_hats[self.steps() - 1 - k];
            x = ddim_denoise_step(&x, eps, t, t_prev, sched)?;
        }
        Ok(x)
    }

    /// Recomputes the upward pass from `x0` with the stored noise maps.
    pub fn replay_up(&self, sched: &NoiseSchedule) -> Result<Vec<LatentGrid>> {
        let mut out = vec![self.x0().clone()];
        for k in 0..self.steps() {
            let x = ddim_invert_step(
                &out[k],
                &self.eps_hats[k],
                self.timesteps.at(k),
                self.timesteps.at(k + 1),
                sched,
            )?;
            out.push(x);
        }
        Ok(out)
    }
}

/// DDIM inversion of `x0` under the source prompt.
///
/// The step from `t_k` to `t_{k+1}` predicts noise at `(x_{t_k}, t_{k+1})`:
/// the predictor is undefined at `t = 0`, and evaluating at the destination
/// timestep is the usual inversion approximation.
pub fn invert(
    x0: &LatentGrid,
    c0: &PromptSpec,
    steps: usize,
    cfg: &RegConfig,
    world: &ToyWorld,
    sched: &NoiseSchedule,
) -> Result<InversionTrace> {
    cfg.validate()?;
    if x0.shape() != world.shape() {
        return Err(Error::invalid(format!(
            "image latent shape {:?} does not match world shape {:?}",
            x0.shape(),
            world.shape()
        )));
    }
    x0.ensure_finite("x0")?;
    let timesteps = StepIndexMap::uniform(sched.total(), steps)?;
    let mix = world.mixture(c0)?;
    let mut latents = Vec::with_capacity(steps + 1);
    let mut eps_hats = Vec::with_capacity(steps);
    latents.push(x0.clone());
    for k in 0..steps {
        let (t, t_next) = (timesteps.at(k), timesteps.at(k + 1));
        let x = &latents[k];
        let raw = mix.predict_noise(x, t_next, sched)?;
        let eps = regularize_noise(&raw, cfg)?;
        let next = ddim_invert_step(x, &eps, t, t_next, sched)?;
        latents.push(next);
        eps_hats.push(eps);
    }
    Ok(InversionTrace {
        latents,
        eps_hats,
        timesteps,
        source: c0.clone(),
    })
}
