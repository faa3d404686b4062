//! Rectified reconstruction and the attention/background preservation step.

use serde::{Deserialize, Serialize};

use crate::compose::MaskSet;
use crate::denoiser::{attention_maps, attention_rows, attention_vjp, AttentionHead, AttentionMap, Conditioner, PromptSpec, ToyWorld};
use crate::error::{Error, Result};
use crate::inversion::InversionTrace;
use crate::numerics::{masked_l2, LatentGrid};
use crate::schedule::{ddim_denoise_step, NoiseSchedule};

const MAX_BACKTRACK: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub lambda_xa: f64,
    pub lambda_b: f64,
    pub steps: usize,
    pub step_size: f64,
    pub tau: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lambda_xa: 1.0,
            lambda_b: 1.75,
            steps: 1,
            step_size: 0.1,
            tau: 1.25,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_xa", self.lambda_xa), ("lambda_b", self.lambda_b)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::invalid(format!("guided step size must be > 0, got {}", self.step_size)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// One visited timestep of the reconstruction branch.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub t: usize,
    /// `x′_t`.
    pub latent: LatentGrid,
    /// `Ā^r_t`, absent for `t = 0` where no denoising step starts.
    pub attention: Option<AttentionMap>,
    /// Correction added to the step that produced this latent.
    pub drift: LatentGrid,
}

/// Reconstruction latents and reference attention, indexed like the trace
/// (`entries[k]` is timestep `timesteps.at(k)`).
#[derive(Clone, Debug, PartialEq)]
pub struct ReconCache {
    pub entries: Vec<CacheEntry>,
    pub source: PromptSpec,
    pub tau: f64,
    pub rectified: bool,
}

impl ReconCache {
    pub fn steps(&self) -> usize {
        self.entries.len() - 1
    }

    pub fn x_prime_0(&self) -> &LatentGrid {
        &self.entries[0].latent
    }

    pub fn entry(&self, k: usize) -> &CacheEntry {
        &self.entries[k]
    }
}

/// Walks down from `x_inv` with the source prompt.
///
/// With `rectify` the step output is replaced by the stored inversion latent
/// and the difference is kept as that step's drift, so the cached path is the
/// inversion path. Without it the plain denoising path is cached.
pub fn reconstruct(
    trace: &InversionTrace,
    world: &ToyWorld,
    sched: &NoiseSchedule,
    head: &AttentionHead,
    tau: f64,
    guidance_scale: f64,
    rectify: bool,
) -> Result<ReconCache> {
    trace.validate(sched)?;
    let steps = trace.steps();
    let cond = Conditioner::new(world, &trace.source, guidance_scale)?;
    let shape = trace.x0().shape();
    let zero = LatentGrid::zeros(shape.0, shape.1, shape.2);
    let mut entries: Vec<Option<CacheEntry>> = vec![None; steps + 1];
    let mut x = trace.x_inv().clone();
    let mut drift = zero.clone();
    for (n, (t, t_prev)) in trace.timesteps.denoise_pairs().enumerate() {
        let k = steps - n;
        let attn = attention_maps(&x, t, &trace.source, head, tau)?;
        let eps = cond.predict(&x, t, sched)?;
        let next = ddim_denoise_step(&x, &eps, t, t_prev, sched)?;
        entries[k] = Some(CacheEntry {
            t,
            latent: x,
            attention: Some(attn),
            drift,
        });
        if rectify {
            let stored = &trace.latents[k - 1];
            drift = stored.sub(&next)?;
            x = stored.clone();
        } else {
            drift = zero.clone();
            x = next;
        }
    }
    entries[0] = Some(CacheEntry {
        t: 0,
        latent: x,
        attention: None,
        drift,
    });
    Ok(ReconCache {
        entries: entries.into_iter().map(|e| e.expect("every step filled")).collect(),
        source: trace.source.clone(),
        tau,
        rectified: rectify,
    })
}

fn check_attention_pair(a: &AttentionMap, b: &AttentionMap, region: &LatentGrid) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::invalid("attention maps differ in dims"));
    }
    if region.height() != a.height() || region.width() != a.width() || region.channels() != 1 {
        return Err(Error::invalid("attention region does not match map dims"));
    }
    Ok(())
}

/// `‖Ā^r − Ā^e‖₂` over region pixels and all tokens.
pub fn l_xa(a_ref: &AttentionMap, a_edit: &AttentionMap, region: &LatentGrid) -> Result<f64> {
    check_attention_pair(a_ref, a_edit, region)?;
    let mut acc = 0.0;
    for p in 0..region.pixels() {
        if region.as_slice()[p] != 0.0 {
            acc += a_ref
                .row(p)
                .iter()
                .zip(a_edit.row(p))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    Ok(acc.sqrt())
}

/// `‖M_0 ⊙ (y* − x′)‖₂`.
pub fn l_b(y_star: &LatentGrid, x_prime: &LatentGrid, m0: &LatentGrid) -> Result<f64> {
    masked_l2(&y_star.sub(x_prime)?, m0)
}

/// `M_0 ⊙ (y − x′) / L_b`, zero where the loss vanishes.
pub fn l_b_grad(y_star: &LatentGrid, x_prime: &LatentGrid, m0: &LatentGrid) -> Result<LatentGrid> {
    let lb = l_b(y_star, x_prime, m0)?;
    let mut g = LatentGrid::zeros(y_star.height(), y_star.width(), y_star.channels());
    if lb == 0.0 {
        return Ok(g);
    }
    for p in 0..y_star.pixels() {
        if m0.as_slice()[p] != 0.0 {
            for ((o, &a), &b) in g.pixel_mut(p).iter_mut().zip(y_star.pixel(p)).zip(x_prime.pixel(p)) {
                *o = (a - b) / lb;
            }
        }
    }
    Ok(g)
}

/// Inputs of one guided update that stay fixed across its descent steps.
pub struct GuidanceTarget<'a> {
    pub t: usize,
    pub x_prime: &'a LatentGrid,
    pub reference: &'a AttentionMap,
    pub masks: &'a MaskSet,
    /// `c_1..c_N`, one per edit mask.
    pub prompts: &'a [PromptSpec],
    pub head: &'a AttentionHead,
}

impl GuidanceTarget<'_> {
    /// Attention rows of `c` inside mask `i + 1`; the read-out is per pixel,
    /// so rows outside the region are never needed.
    fn region_rows(&self, y: &LatentGrid, i: usize, c: &PromptSpec, cfg: &GuidanceConfig) -> Result<(Vec<usize>, Vec<f64>)> {
        let region = self.masks.mask(i + 1);
        if self.reference.height() != region.height()
            || self.reference.width() != region.width()
            || self.reference.tokens() != c.len()
        {
            return Err(Error::invalid("reference attention does not match the edit prompt or mask"));
        }
        let px: Vec<usize> = (0..region.pixels()).filter(|&p| region.as_slice()[p] != 0.0).collect();
        let rows = attention_rows(y, self.t, c, self.head, cfg.tau, &px)?;
        Ok((px, rows))
    }

    /// Same sum as [`l_xa`], over precomputed region rows.
    fn l_xa_rows(&self, px: &[usize], rows: &[f64], l: usize) -> f64 {
        let mut acc = 0.0;
        for (k, &p) in px.iter().enumerate() {
            acc += self
                .reference
                .row(p)
                .iter()
                .zip(&rows[k * l..(k + 1) * l])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        acc.sqrt()
    }

    fn check(&self, y: &LatentGrid) -> Result<()> {
        if self.prompts.len() != self.masks.n() {
            return Err(Error::invalid(format!(
                "{} target prompts for {} masks",
                self.prompts.len(),
                self.masks.n()
            )));
        }
        y.check_same_shape(self.x_prime, "guided_update")?;
        y.check_mask(self.masks.background(), "guided_update")?;
        Ok(())
    }

    /// `J(y) = λ_xa Σ_i L_xa(Ā^r, Ā^e_i, M_i) + λ_b L_b(y, x′, M_0)`.
    pub fn objective(&self, y: &LatentGrid, cfg: &GuidanceConfig) -> Result<f64> {
        self.check(y)?;
        let mut j = 0.0;
        if cfg.lambda_xa != 0.0 {
            for (i, c) in self.prompts.iter().enumerate() {
                let (px, rows) = self.region_rows(y, i, c, cfg)?;
                j += cfg.lambda_xa * self.l_xa_rows(&px, &rows, c.len());
            }
        }
        if cfg.lambda_b != 0.0 {
            j += cfg.lambda_b * l_b(y, self.x_prime, self.masks.background())?;
        }
        Ok(j)
    }

    pub fn gradient(&self, y: &LatentGrid, cfg: &GuidanceConfig) -> Result<LatentGrid> {
        self.check(y)?;
        let mut g = LatentGrid::zeros(y.height(), y.width(), y.channels());
        if cfg.lambda_xa != 0.0 {
            for (i, c) in self.prompts.iter().enumerate() {
                let l = c.len();
                let (px, rows) = self.region_rows(y, i, c, cfg)?;
                let loss = self.l_xa_rows(&px, &rows, l);
                if loss == 0.0 {
                    continue;
                }
                let mut up = vec![0.0; y.pixels() * l];
                for (k, &p) in px.iter().enumerate() {
                    for j in 0..l {
                        up[p * l + j] = (rows[k * l + j] - self.reference.row(p)[j]) / loss;
                    }
                }
                let gi = attention_vjp(y, self.t, c, self.head, cfg.tau, &up)?;
                g.axpy(cfg.lambda_xa, &gi)?;
            }
        }
        if cfg.lambda_b != 0.0 {
            g.axpy(cfg.lambda_b, &l_b_grad(y, self.x_prime, self.masks.background())?)?;
        }
        g.ensure_finite("guidance gradient")?;
        Ok(g)
    }
}

/// `K_g` descent steps on `J`; returns the latent and `J` after each
/// accepted step (the first entry is `J` before any step).
///
/// Steps that would raise `J` are halved; if none within the budget lowers
/// it the latent is kept.
pub fn guided_update_traced(
    y_t: &LatentGrid,
    target: &GuidanceTarget<'_>,
    cfg: &GuidanceConfig,
) -> Result<(LatentGrid, Vec<f64>)> {
    cfg.validate()?;
    target.check(y_t)?;
    if (cfg.lambda_xa == 0.0 && cfg.lambda_b == 0.0) || cfg.steps == 0 {
        return Ok((y_t.clone(), Vec::new()));
    }
    let mut y = y_t.clone();
    let mut j = target.objective(&y, cfg)?;
    let mut history = vec![j];
    for _ in 0..cfg.steps {
        let g = target.gradient(&y, cfg)?;
        if g.max_abs() == 0.0 {
            break;
        }
        let mut step = cfg.step_size;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACK {
            let mut cand = y.clone();
            cand.axpy(-step, &g)?;
            let jc = target.objective(&cand, cfg)?;
            if jc.is_finite() && jc <= j {
                accepted = Some((cand, jc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, jc)) = accepted else { break };
        y = cand;
        j = jc;
        history.push(j);
    }
    Ok((y, history))
}

pub fn guided_update(y_t: &LatentGrid, target: &GuidanceTarget<'_>, cfg: &GuidanceConfig) -> Result<LatentGrid> {
    Ok(guided_update_traced(y_t, target, cfg)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compose::build_mask_set;
    use crate::denoiser::{Component, HeadDims, Token};
    use crate::inversion::{invert, RegConfig};
    use crate::numerics::SeededRng;
    use crate::schedule::{make_schedule, ScheduleKind};

    fn map(h: usize, w: usize, l: usize, f: impl Fn(usize, usize) -> f64) -> AttentionMap {
        let mut v = Vec::new();
        for p in 0..h * w {
            for j in 0..l {
                v.push(f(p, j));
            }
        }
        AttentionMap::from_values(h, w, l, v, 1.0).unwrap()
    }

    #[test]
    fn l_xa_examples() {
        let a = map(3, 3, 3, |_, _| 1.0 / 3.0);
        let region = LatentGrid::filled(3, 3, 1, 1.0);
        assert_eq!(l_xa(&a, &a, &region).unwrap(), 0.0);
        let k = [0usize, 4, 7];
        let b = map(3, 3, 3, |p, j| {
            let base = 1.0 / 3.0;
            if k.contains(&p) {
                base + [0.1, -0.1, 0.0][j]
            } else {
                base
            }
        });
        let v = l_xa(&a, &b, &region).unwrap();
        assert!((v - 0.1 * (2.0 * 3.0f64).sqrt()).abs() < 1e-12);
        assert_eq!(v, l_xa(&b, &a, &region).unwrap());
        let mut partial = LatentGrid::zeros(3, 3, 1);
        partial.set(1, 1, 0, 1.0);
        assert!((l_xa(&a, &b, &partial).unwrap() - 0.1 * 2f64.sqrt()).abs() < 1e-12);
        assert!(l_xa(&a, &map(3, 3, 2, |_, _| 0.5), &region).is_err());
    }

    #[test]
    fn l_b_examples() {
        let x = LatentGrid::filled(3, 3, 2, 0.4);
        let m0 = LatentGrid::from_fn(3, 3, 1, |y, _, _| if y == 0 { 1.0 } else { 0.0 });
        assert_eq!(l_b(&x, &x, &m0).unwrap(), 0.0);
        let mut y = x.clone();
        for (yy, xx, c) in [(0, 0, 0), (0, 1, 1), (0, 2, 0), (2, 2, 1)] {
            y.set(yy, xx, c, 1.4);
        }
        assert!((l_b(&y, &x, &m0).unwrap() - 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(l_b(&y, &x, &LatentGrid::zeros(3, 3, 1)).unwrap(), 0.0);
        let g = l_b_grad(&y, &x, &m0).unwrap();
        assert_eq!(g.get(2, 2, 1), 0.0);
        assert!(l_b_grad(&x, &x, &m0).unwrap().max_abs() == 0.0);
    }

    fn head(seed: u64) -> AttentionHead {
        AttentionHead::seeded(
            seed,
            HeadDims {
                channels: 2,
                vocab: 6,
                embed_dim: 4,
                proj_dim: 4,
            },
            1000,
        )
        .unwrap()
    }

    struct Fixture {
        x_prime: LatentGrid,
        reference: AttentionMap,
        masks: MaskSet,
        prompts: Vec<PromptSpec>,
        head: AttentionHead,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = SeededRng::new(seed, 7);
        let x_prime = LatentGrid::standard_normal(8, 8, 2, &mut rng);
        let head = head(seed);
        let c0 = PromptSpec::new(&[1, 2], 3, "").unwrap();
        let reference = attention_maps(&x_prime, 300, &c0, &head, 1.25).unwrap();
        let m1 = LatentGrid::from_fn(8, 8, 1, |y, x, _| if y < 4 && x < 5 { 1.0 } else { 0.0 });
        let m2 = LatentGrid::from_fn(8, 8, 1, |y, x, _| if y >= 3 && x >= 4 { 1.0 } else { 0.0 });
        let masks = build_mask_set(8, 8, &[m1, m2]).unwrap();
        let prompts = vec![
            PromptSpec::new(&[3, 2], 3, "").unwrap(),
            PromptSpec::new(&[1, 5], 3, "").unwrap(),
        ];
        Fixture {
            x_prime,
            reference,
            masks,
            prompts,
            head,
        }
    }

    impl Fixture {
        fn target(&self) -> GuidanceTarget<'_> {
            GuidanceTarget {
                t: 300,
                x_prime: &self.x_prime,
                reference: &self.reference,
                masks: &self.masks,
                prompts: &self.prompts,
                head: &self.head,
            }
        }
    }

    #[test]
    fn zero_weights_are_identity() {
        let f = fixture(1);
        let mut rng = SeededRng::new(1, 1);
        let y = LatentGrid::standard_normal(8, 8, 2, &mut rng);
        let cfg = GuidanceConfig {
            lambda_xa: 0.0,
            lambda_b: 0.0,
            ..GuidanceConfig::default()
        };
        assert_eq!(guided_update(&y, &f.target(), &cfg).unwrap(), y);
    }

    #[test]
    fn background_bump_shrinks_only_in_background() {
        let f = fixture(2);
        let mut y = f.x_prime.clone();
        let (by, bx) = (7, 0);
        assert_eq!(f.masks.background().get(by, bx, 0), 1.0);
        y.set(by, bx, 1, y.get(by, bx, 1) + 1.0);
        let cfg = GuidanceConfig {
            lambda_xa: 0.0,
            ..GuidanceConfig::default()
        };
        let out = guided_update(&y, &f.target(), &cfg).unwrap();
        let before = y.get(by, bx, 1) - f.x_prime.get(by, bx, 1);
        let after = out.get(by, bx, 1) - f.x_prime.get(by, bx, 1);
        assert!(after.abs() < before.abs() && after > 0.0);
        for p in 0..64 {
            if f.masks.background().as_slice()[p] == 0.0 {
                assert_eq!(out.pixel(p), y.pixel(p));
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..4 {
            let f = fixture(seed);
            let target = f.target();
            let mut rng = SeededRng::new(seed, 2);
            let y = f.x_prime.add(&LatentGrid::standard_normal(8, 8, 2, &mut rng).scale(0.5)).unwrap();
            let cfg = GuidanceConfig::default();
            let g = target.gradient(&y, &cfg).unwrap();
            let h = 1e-3;
            for i in 0..y.len() {
                let mut p = y.clone();
                p.as_mut_slice()[i] += h;
                let mut m = y.clone();
                m.as_mut_slice()[i] -= h;
                let fd = (target.objective(&p, &cfg).unwrap() - target.objective(&m, &cfg).unwrap()) / (2.0 * h);
                let a = g.as_slice()[i];
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
                assert!(rel <= 1e-4 || (fd - a).abs() < 1e-8, "seed {seed} entry {i}: {fd} vs {a}");
            }
        }
    }

    #[test]
    fn objective_never_increases() {
        for seed in 0..10 {
            let f = fixture(seed);
            let mut rng = SeededRng::new(seed, 9);
            let y = LatentGrid::standard_normal(8, 8, 2, &mut rng);
            let cfg = GuidanceConfig {
                steps: 5,
                step_size: 2.0,
                ..GuidanceConfig::default()
            };
            let (_, hist) = guided_update_traced(&y, &f.target(), &cfg).unwrap();
            assert!(hist.windows(2).all(|w| w[1] <= w[0]), "{hist:?}");
        }
    }

    #[test]
    fn prompt_count_must_match_masks() {
        let f = fixture(0);
        let mut target = f.target();
        let one = &f.prompts[..1];
        target.prompts = one;
        assert!(guided_update(&f.x_prime, &target, &GuidanceConfig::default()).is_err());
    }

    fn world() -> ToyWorld {
        let shape = (8, 8, 2);
        let mean = LatentGrid::from_fn(8, 8, 2, |y, x, c| ((y * 3 + x + c) % 7) as f64 * 0.2 - 0.6);
        ToyWorld::new(
            shape,
            3,
            vec![
                ToyWorld::null_token(shape),
                Token {
                    label: "scene".into(),
                    components: vec![Component { weight: 1.0, std: 0.1, mean }],
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn rectified_cache_follows_inversion_path() {
        let s = make_schedule(1000, ScheduleKind::LinearBeta).unwrap();
        let w = world();
        let h = AttentionHead::for_world(&w, 1000, 42).unwrap();
        let c = w.prompt(&[1], "").unwrap();
        let mut rng = SeededRng::new(5, 0);
        let x0 = LatentGrid::standard_normal(8, 8, 2, &mut rng).scale(0.3);
        for reg in [RegConfig::disabled(), RegConfig { levels: 3, ..RegConfig::default() }] {
            let tr = invert(&x0, &c, 50, &reg, &w, &s).unwrap();
            let cache = reconstruct(&tr, &w, &s, &h, 1.25, 1.0, true).unwrap();
            assert_eq!(cache.steps(), 50);
            for k in 0..=50 {
                assert!(cache.entry(k).latent.max_abs_diff(&tr.latents[k]).unwrap() <= 1e-5);
                assert_eq!(cache.entry(k).t, tr.timesteps.at(k));
            }
            assert!(cache.x_prime_0().max_abs_diff(&x0).unwrap() <= 1e-5);
        }
    }

    #[test]
    fn unrectified_cache_is_plain_denoising() {
        let s = make_schedule(1000, ScheduleKind::LinearBeta).unwrap();
        let w = world();
        let h = AttentionHead::for_world(&w, 1000, 42).unwrap();
        let c = w.prompt(&[1], "").unwrap();
        let x0 = LatentGrid::filled(8, 8, 2, 0.1);
        let tr = invert(&x0, &c, 10, &RegConfig::disabled(), &w, &s).unwrap();
        let cache = reconstruct(&tr, &w, &s, &h, 1.25, 1.0, false).unwrap();
        assert!(cache.entries.iter().all(|e| e.drift.max_abs() == 0.0));
        let mix = w.mixture(&c).unwrap();
        let mut x = tr.x_inv().clone();
        for (t, tp) in tr.timesteps.denoise_pairs() {
            let eps = mix.predict_noise(&x, t, &s).unwrap();
            x = ddim_denoise_step(&x, &eps, t, tp, &s).unwrap();
        }
        assert_eq!(cache.x_prime_0(), &x);
    }
}
