//! Invert, reconstruct and edit, plus the ablation and timing runners.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compose::{bootstrap_latent, build_mask_set, make_background_bt, psi_step, BootstrapConfig, BranchOutputs, MaskSet};
use crate::denoiser::{AttentionHead, Conditioner, PromptSpec, ToyWorld, DEFAULT_HEAD_SEED};
use crate::error::{Error, PhaseExt, Result};
use crate::inversion::{invert, RegConfig};
use crate::io::metrics::{compute_metrics, MetricsRecord};
use crate::numerics::{LatentGrid, SeededRng};
use crate::preserve::{guided_update, reconstruct, GuidanceConfig, GuidanceTarget, ReconCache};
use crate::schedule::{ddim_denoise_step, make_schedule, NoiseSchedule, ScheduleKind, DEFAULT_INFERENCE_STEPS, DEFAULT_TOTAL_STEPS};
use crate::toy::{sample_clean, ToySpec};

/// Stream of the random starting latent used by the random-start ablation.
pub const RANDOM_START_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartMode {
    #[default]
    Inversion,
    Random,
}

/// Every knob of an edit run. Echoed verbatim into results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobConfig {
    pub t_total: usize,
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub reg: RegConfig,
    pub guidance: GuidanceConfig,
    pub bootstrap: BootstrapConfig,
    /// Classifier-free guidance scale; 1 disables guidance.
    pub guidance_scale: f64,
    pub seed: u64,
    pub rectify: bool,
}

impl Default for JobConfig {
    fn default() -> Self {
        Self {
            t_total: DEFAULT_TOTAL_STEPS,
            steps: DEFAULT_INFERENCE_STEPS,
            schedule: ScheduleKind::LinearBeta,
            reg: RegConfig::default(),
            guidance: GuidanceConfig::default(),
            bootstrap: BootstrapConfig::default(),
            guidance_scale: 1.0,
            seed: 0,
            rectify: true,
        }
    }
}

impl JobConfig {
    /// Sets the master seed and the bootstrap colour seed together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.bootstrap.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("an edit needs at least one inference step"));
        }
        if self.steps > self.t_total {
            return Err(Error::invalid(format!(
                "{} inference steps exceed the {}-step schedule",
                self.steps, self.t_total
            )));
        }
        self.reg.validate()?;
        self.guidance.validate()?;
        self.bootstrap.validate(self.steps)?;
        if !(self.guidance_scale >= 0.0) || !self.guidance_scale.is_finite() {
            return Err(Error::invalid("guidance scale must be >= 0"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_total, self.schedule)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditJob {
    pub id: String,
    pub x0: LatentGrid,
    pub source: PromptSpec,
    pub masks: Vec<LatentGrid>,
    pub targets: Vec<PromptSpec>,
    pub config: JobConfig,
}

impl EditJob {
    pub fn validate(&self, world: &ToyWorld) -> Result<()> {
        self.config.validate()?;
        if self.masks.len() != self.targets.len() {
            return Err(Error::invalid(format!(
                "{} masks but {} target prompts",
                self.masks.len(),
                self.targets.len()
            )));
        }
        if self.x0.shape() != world.shape() {
            return Err(Error::invalid(format!(
                "image shape {:?} does not match world shape {:?}",
                self.x0.shape(),
                world.shape()
            )));
        }
        world.check_prompt(&self.source)?;
        for t in &self.targets {
            world.check_prompt(t)?;
        }
        Ok(())
    }

    pub fn from_case(case: &crate::io::case::LoadedCase, config: &JobConfig) -> Self {
        Self {
            id: case.case.id.clone(),
            x0: case.image.clone(),
            source: case.source.clone(),
            masks: case.masks.clone(),
            targets: case.targets.clone(),
            config: config.clone(),
        }
    }

    pub fn mask_set(&self) -> Result<MaskSet> {
        build_mask_set(self.x0.height(), self.x0.width(), &self.masks)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub inversion: f64,
    pub reconstruction: f64,
    pub edit: f64,
    pub metrics: f64,
    pub total: f64,
    /// Per-pass totals of an iterative run.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub passes: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditResult {
    pub id: String,
    pub edited: LatentGrid,
    pub reconstruction: LatentGrid,
    pub metrics: MetricsRecord,
    pub timings: PhaseTimings,
    pub config: JobConfig,
    pub start: StartMode,
    pub iterative: bool,
}

/// The full pipeline with the inverted latent as the starting point.
pub fn run_edit(job: &EditJob, world: &ToyWorld, head: &AttentionHead) -> Result<EditResult> {
    run_with_start(job, world, head, StartMode::Inversion)
}

/// Same loop, started from seeded Gaussian noise instead of `x_inv`.
pub fn run_edit_random_start(job: &EditJob, world: &ToyWorld, head: &AttentionHead) -> Result<EditResult> {
    run_with_start(job, world, head, StartMode::Random)
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn run_with_start(job: &EditJob, world: &ToyWorld, head: &AttentionHead, start: StartMode) -> Result<EditResult> {
    let t_all = Instant::now();
    job.validate(world).phase("validate")?;
    let cfg = &job.config;
    let sched = cfg.schedule()?;
    let ms = job.mask_set().phase("validate")?;

    let t0 = Instant::now();
    let trace = invert(&job.x0, &job.source, cfg.steps, &cfg.reg, world, &sched).phase("inversion")?;
    let inversion = secs(t0);

    let t0 = Instant::now();
    let cache = reconstruct(&trace, world, &sched, head, cfg.guidance.tau, cfg.guidance_scale, cfg.rectify)
        .phase("reconstruction")?;
    let reconstruction = secs(t0);

    let t0 = Instant::now();
    let y_t = match start {
        StartMode::Inversion => trace.x_inv().clone(),
        StartMode::Random => {
            let (h, w, c) = world.shape();
            let mut rng = SeededRng::new(cfg.seed, RANDOM_START_STREAM);
            LatentGrid::standard_normal(h, w, c, &mut rng)
        }
    };
    let edited = edit_loop(job, &ms, y_t, &cache, world, &sched, head).phase("edit")?;
    let edit = secs(t0);

    let t0 = Instant::now();
    let metrics = compute_metrics(
        &job.x0,
        &edited,
        cache.x_prime_0(),
        &ms,
        &job.source,
        &job.targets,
        world,
    )
    .phase("metrics")?;
    let metrics_time = secs(t0);

    Ok(EditResult {
        id: job.id.clone(),
        edited,
        reconstruction: cache.x_prime_0().clone(),
        metrics,
        timings: PhaseTimings {
            inversion,
            reconstruction,
            edit,
            metrics: metrics_time,
            total: secs(t_all),
            passes: Vec::new(),
        },
        config: cfg.clone(),
        start,
        iterative: false,
    })
}

/// The composed denoising loop from `y_T` down to `y_0`.
///
/// Per step: branch inputs are spliced with the background during the first
/// `T_b` iterations, each branch predicts its noise, the shared latent takes
/// the guided preservation step, every branch denoises its (spliced) guided
/// latent with its own prediction plus the reconstruction drift, and the
/// branches are fused.
pub fn edit_loop(
    job: &EditJob,
    ms: &MaskSet,
    y_start: LatentGrid,
    cache: &ReconCache,
    world: &ToyWorld,
    sched: &NoiseSchedule,
    head: &AttentionHead,
) -> Result<LatentGrid> {
    let cfg = &job.config;
    if cache.steps() != cfg.steps {
        return Err(Error::invalid(format!(
            "cache covers {} steps, job runs {}",
            cache.steps(),
            cfg.steps
        )));
    }
    if cache.tau != cfg.guidance.tau {
        return Err(Error::invalid("cache attention was recorded with a different tau"));
    }
    let mut prompts = Vec::with_capacity(ms.n() + 1);
    prompts.push(job.source.clone());
    prompts.extend(job.targets.iter().cloned());
    let conds: Vec<Conditioner> = prompts
        .iter()
        .map(|c| Conditioner::new(world, c, cfg.guidance_scale))
        .collect::<Result<_>>()?;
    let t_b = cfg.bootstrap.t_b;
    let shape = world.shape();

    let mut y = y_start;
    let steps = cfg.steps;
    for (n, k) in (1..=steps).rev().enumerate() {
        let entry = cache.entry(k);
        let (t, t_prev) = (entry.t, cache.entry(k - 1).t);
        let b_t = if n < t_b && ms.n() > 0 {
            Some(make_background_bt(t, &cfg.bootstrap, shape, sched)?)
        } else {
            None
        };
        let splice = |i: usize, v: &LatentGrid| -> Result<LatentGrid> {
            match (&b_t, i) {
                (Some(b), i) if i > 0 => bootstrap_latent(v, ms.mask(i), b, n, t_b),
                _ => Ok(v.clone()),
            }
        };

        let eps: Vec<LatentGrid> = (0..=ms.n())
            .into_par_iter()
            .map(|i| conds[i].predict(&splice(i, &y)?, t, sched))
            .collect::<Result<_>>()?;

        let reference = entry
            .attention
            .as_ref()
            .ok_or_else(|| Error::invalid("cache entry has no attention map"))?;
        let target = GuidanceTarget {
            t,
            x_prime: &entry.latent,
            reference,
            masks: ms,
            prompts: &job.targets,
            head,
        };
        let y_g = guided_update(&y, &target, &cfg.guidance)?;

        let drift = &cache.entry(k - 1).drift;
        let outs: Vec<LatentGrid> = (0..=ms.n())
            .into_par_iter()
            .map(|i| {
                let mut o = ddim_denoise_step(&splice(i, &y_g)?, &eps[i], t, t_prev, sched)?;
                o.axpy(1.0, drift)?;
                Ok(o)
            })
            .collect::<Result<_>>()?;
        y = psi_step(&BranchOutputs::new(outs)?, ms)?;
        y.ensure_finite("edit latent")?;
    }
    Ok(y)
}

/// One pass per mask, each pass re-inverting the previous pass's output.
pub fn run_iterative(job: &EditJob, world: &ToyWorld, head: &AttentionHead) -> Result<EditResult> {
    let t_all = Instant::now();
    job.validate(world).phase("validate")?;
    if job.masks.is_empty() {
        let mut r = run_edit(job, world, head)?;
        r.iterative = true;
        return Ok(r);
    }
    let mut current = job.x0.clone();
    let mut timings = PhaseTimings::default();
    let mut last = None;
    for (i, (mask, target)) in job.masks.iter().zip(&job.targets).enumerate() {
        let pass = EditJob {
            id: format!("{}#{}", job.id, i + 1),
            x0: current,
            source: job.source.clone(),
            masks: vec![mask.clone()],
            targets: vec![target.clone()],
            config: job.config.clone(),
        };
        let r = run_edit(&pass, world, head)?;
        timings.inversion += r.timings.inversion;
        timings.reconstruction += r.timings.reconstruction;
        timings.edit += r.timings.edit;
        timings.passes.push(r.timings.total);
        current = r.edited.clone();
        last = Some(r);
    }
    let last = last.expect("at least one pass");
    let ms = job.mask_set()?;
    let t0 = Instant::now();
    // background and structure are scored against the first pass's inputs
    let sched = job.config.schedule()?;
    let recon = if job.masks.len() == 1 {
        last.reconstruction.clone()
    } else {
        let trace = invert(&job.x0, &job.source, job.config.steps, &job.config.reg, world, &sched)?;
        reconstruct(&trace, world, &sched, head, job.config.guidance.tau, job.config.guidance_scale, job.config.rectify)?
            .x_prime_0()
            .clone()
    };
    let metrics = compute_metrics(&job.x0, &current, &recon, &ms, &job.source, &job.targets, world)?;
    timings.metrics = secs(t0);
    timings.total = secs(t_all);
    Ok(EditResult {
        id: job.id.clone(),
        edited: current,
        reconstruction: recon,
        metrics,
        timings,
        config: job.config.clone(),
        start: StartMode::Inversion,
        iterative: true,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    Tau,
    #[serde(rename = "tb")]
    Tb,
    Inversion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub job: String,
    pub value: f64,
    pub label: String,
    pub metrics: MetricsRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub values: Vec<f64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Mean of a metric over jobs for each grid value, in grid order.
    /// Infinite entries are kept, so one perfect job makes the mean infinite.
    pub fn mean_by_value(&self, metric: impl Fn(&MetricsRecord) -> Option<f64>) -> Vec<(f64, Option<f64>)> {
        let mut out: Vec<(f64, Option<f64>)> = Vec::new();
        let mut labels: Vec<&str> = Vec::new();
        for row in &self.rows {
            if !labels.contains(&row.label.as_str()) {
                labels.push(&row.label);
                out.push((row.value, None));
            }
        }
        for (slot, label) in labels.iter().enumerate() {
            let vals: Vec<f64> = self
                .rows
                .iter()
                .filter(|r| r.label == *label)
                .filter_map(|r| metric(&r.metrics))
                .collect();
            if !vals.is_empty() {
                out[slot].1 = Some(vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        out
    }
}

/// Reruns every job for each grid value with everything else fixed.
pub fn run_ablation(
    jobs: &[EditJob],
    axis: AblationAxis,
    values: &[f64],
    world: &ToyWorld,
    head: &AttentionHead,
) -> Result<AblationReport> {
    let grid: Vec<(f64, String, StartMode, Option<f64>)> = match axis {
        AblationAxis::Inversion => vec![
            (0.0, "inversion".into(), StartMode::Inversion, None),
            (1.0, "random".into(), StartMode::Random, None),
        ],
        _ => {
            if values.is_empty() {
                return Err(Error::invalid("ablation needs at least one value"));
            }
            values.iter().map(|&v| (v, format!("{v}"), StartMode::Inversion, Some(v))).collect()
        }
    };
    let mut work = Vec::new();
    for (value, label, start, setting) in &grid {
        for job in jobs {
            let mut j = job.clone();
            if let Some(v) = setting {
                match axis {
                    AblationAxis::Tau => j.config.guidance.tau = *v,
                    AblationAxis::Tb => {
                        if *v < 0.0 || v.fract() != 0.0 {
                            return Err(Error::invalid(format!("T_b must be a non-negative integer, got {v}")));
                        }
                        j.config.bootstrap.t_b = *v as usize;
                    }
                    AblationAxis::Inversion => {}
                }
            }
            work.push((*value, label.clone(), *start, j));
        }
    }
    let rows = work
        .into_par_iter()
        .map(|(value, label, start, j)| {
            let r = run_with_start(&j, world, head, start)?;
            Ok(AblationRow {
                job: j.id.clone(),
                value,
                label,
                metrics: r.metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        axis,
        values: grid.iter().map(|g| g.0).collect(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub n_masks: usize,
    pub single_pass: f64,
    pub iterative: f64,
    pub speedup: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// A synthetic job editing the first `n` slots of the timing world.
pub fn timing_job(spec: &ToySpec, world: &ToyWorld, n: usize, config: &JobConfig) -> Result<EditJob> {
    if n > spec.slots.len() || n + 1 > spec.prompt_len {
        return Err(Error::invalid(format!("timing world supports at most {} masks", spec.slots.len())));
    }
    let ncol = spec.colors.len();
    let mut source_tokens = vec![1];
    source_tokens.extend((0..n).map(|s| spec.object_token(s % ncol, s)));
    let source = world.prompt(&source_tokens, "")?;
    let targets = (0..n)
        .map(|s| {
            let mut t = source_tokens.clone();
            t[s + 1] = spec.object_token((s + 1) % ncol, s);
            world.prompt(&t, "")
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = SeededRng::new(config.seed, 0x71);
    Ok(EditJob {
        id: format!("timing_n{n}"),
        x0: sample_clean(world, &source, &mut rng)?,
        source,
        masks: (0..n).map(|s| spec.slot_mask(s)).collect(),
        targets,
        config: config.clone(),
    })
}

/// Median wall-clock of single-pass vs iterative editing per mask count.
pub fn bench_timing(n_masks: &[usize], repetitions: usize, config: &JobConfig) -> Result<Vec<TimingRow>> {
    if repetitions < 3 {
        return Err(Error::invalid("timing needs at least 3 repetitions"));
    }
    let spec = ToySpec::timing();
    let world = spec.build()?;
    let head = AttentionHead::for_world(&world, config.t_total, DEFAULT_HEAD_SEED)?;
    n_masks
        .iter()
        .map(|&n| {
            let job = timing_job(&spec, &world, n, config)?;
            let mut single = Vec::with_capacity(repetitions);
            let mut iter = Vec::with_capacity(repetitions);
            for _ in 0..repetitions {
                let t0 = Instant::now();
                run_edit(&job, &world, &head)?;
                single.push(secs(t0));
                let t0 = Instant::now();
                run_iterative(&job, &world, &head)?;
                iter.push(secs(t0));
            }
            let (s, i) = (median(single), median(iter));
            Ok(TimingRow {
                n_masks: n,
                single_pass: s,
                iterative: i,
                speedup: i / s,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::toy_suite;

    fn setup() -> (ToySpec, ToyWorld, AttentionHead) {
        let spec = ToySpec::bench();
        let world = spec.build().unwrap();
        let head = AttentionHead::for_world(&world, 1000, DEFAULT_HEAD_SEED).unwrap();
        (spec, world, head)
    }

    fn job_from(case: &crate::toy::ToyCase, config: JobConfig) -> EditJob {
        EditJob {
            id: case.id.clone(),
            x0: case.image.clone(),
            source: case.source.clone(),
            masks: case.masks.clone(),
            targets: case.targets.clone(),
            config,
        }
    }

    #[test]
    fn no_masks_reproduces_reconstruction() {
        let (spec, world, head) = setup();
        let case = &toy_suite(&spec, &world, 1, 3).unwrap()[0];
        let mut job = job_from(case, JobConfig::default().with_seed(3));
        job.masks.clear();
        job.targets.clear();
        let r = run_edit(&job, &world, &head).unwrap();
        assert!(r.edited.max_abs_diff(&r.reconstruction).unwrap() <= 1e-5);
        assert!(r.reconstruction.max_abs_diff(&job.x0).unwrap() <= 1e-5);
    }

    #[test]
    fn full_mask_same_prompt_degenerates_to_reconstruction() {
        let (spec, world, head) = setup();
        let case = &toy_suite(&spec, &world, 1, 4).unwrap()[0];
        let mut config = JobConfig::default().with_seed(4);
        config.guidance.lambda_b = 0.0;
        config.guidance.lambda_xa = 0.0;
        config.bootstrap.t_b = 0;
        let mut job = job_from(case, config);
        job.masks = vec![LatentGrid::filled(32, 32, 1, 1.0)];
        job.targets = vec![job.source.clone()];
        let r = run_edit(&job, &world, &head).unwrap();
        assert!(r.edited.max_abs_diff(&r.reconstruction).unwrap() <= 1e-4);
    }

    #[test]
    fn edit_is_deterministic_and_single_mask_iterative_matches() {
        let (spec, world, head) = setup();
        let case = &toy_suite(&spec, &world, 1, 5).unwrap()[0];
        assert_eq!(case.masks.len(), 1);
        let job = job_from(case, JobConfig::default().with_seed(5));
        let a = run_edit(&job, &world, &head).unwrap();
        let b = run_edit(&job, &world, &head).unwrap();
        assert_eq!(a.edited, b.edited);
        assert_eq!(a.metrics, b.metrics);
        let it = run_iterative(&job, &world, &head).unwrap();
        assert_eq!(it.edited, a.edited);
        let ra = run_edit_random_start(&job, &world, &head).unwrap();
        let rb = run_edit_random_start(&job, &world, &head).unwrap();
        assert_eq!(ra.edited, rb.edited);
    }

    #[test]
    fn validation_errors_carry_phase() {
        let (spec, world, head) = setup();
        let case = &toy_suite(&spec, &world, 1, 5).unwrap()[0];
        let mut job = job_from(case, JobConfig::default());
        job.targets.clear();
        let err = run_edit(&job, &world, &head).unwrap_err();
        assert!(matches!(err, Error::Phase { phase: "validate", .. }));
        assert!(matches!(err.root(), Error::InvalidArgument(_)));
    }

    #[test]
    fn ablation_grid_shapes() {
        let (spec, world, head) = setup();
        let case = &toy_suite(&spec, &world, 1, 6).unwrap()[0];
        let mut config = JobConfig::default().with_seed(6);
        config.steps = 10;
        config.bootstrap.t_b = 5;
        let jobs = vec![job_from(case, config)];
        let r = run_ablation(&jobs, AblationAxis::Tb, &[0.0, 2.0, 5.0], &world, &head).unwrap();
        assert_eq!(r.rows.len(), 3);
        let r = run_ablation(&jobs, AblationAxis::Inversion, &[], &world, &head).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(run_ablation(&jobs, AblationAxis::Tau, &[], &world, &head).is_err());
        assert!(run_ablation(&jobs, AblationAxis::Tb, &[1.5], &world, &head).is_err());
    }
}
