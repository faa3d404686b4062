//! Background fidelity, structure and prompt-fidelity scores.

use serde::{Deserialize, Serialize};

use crate::compose::MaskSet;
use crate::denoiser::{PromptSpec, ToyWorld};
use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, LatentGrid};

/// Dynamic range of latents in image space (`[−1, 1]`).
pub const PEAK: f64 = 2.0;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * PEAK) * (0.01 * PEAK);
const SSIM_C2: f64 = (0.03 * PEAK) * (0.03 * PEAK);
pub const STRUCTURE_BLOCK: usize = 4;

fn check_region(a: &LatentGrid, b: &LatentGrid, m0: &LatentGrid, what: &str) -> Result<usize> {
    a.check_same_shape(b, what)?;
    a.check_mask(m0, what)?;
    let active = m0.as_slice().iter().filter(|&&v| v != 0.0).count();
    if active == 0 {
        return Err(Error::UndefinedMetric(format!("{what}: background region is empty")));
    }
    Ok(active)
}

/// PSNR over the background in dB; `+∞` when the regions agree exactly.
pub fn bg_psnr(a: &LatentGrid, b: &LatentGrid, m0: &LatentGrid) -> Result<f64> {
    let active = check_region(a, b, m0, "bg_psnr")?;
    let mut se = 0.0;
    for p in 0..a.pixels() {
        if m0.as_slice()[p] != 0.0 {
            se += a.pixel(p).iter().zip(b.pixel(p)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
    }
    let mse = se / (active * a.channels()) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (PEAK * PEAK / mse).log10())
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    k
}

/// Mean SSIM over windows centred in the background, then over channels.
///
/// Windows are clipped at the grid border and their weights renormalized.
pub fn bg_ssim(a: &LatentGrid, b: &LatentGrid, m0: &LatentGrid) -> Result<f64> {
    let active = check_region(a, b, m0, "bg_ssim")?;
    let k = gaussian_kernel();
    let r = SSIM_WINDOW as isize / 2;
    let (h, w, ch) = a.shape();
    let mut total = 0.0;
    for c in 0..ch {
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                if m0.get(y, x, 0) == 0.0 {
                    continue;
                }
                let (mut sw, mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -r..=r {
                    let yy = y as isize + dy;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for dx in -r..=r {
                        let xx = x as isize + dx;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let wt = k[(dy + r) as usize] * k[(dx + r) as usize];
                        let va = a.get(yy as usize, xx as usize, c);
                        let vb = b.get(yy as usize, xx as usize, c);
                        sw += wt;
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (ma, mb) = (ma / sw, mb / sw);
                let va = saa / sw - ma * ma;
                let vb = sbb / sw - mb * mb;
                let cov = sab / sw - ma * mb;
                acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
        }
        total += acc / active as f64;
    }
    Ok(total / ch as f64)
}

/// Block-max of the channel mean over `STRUCTURE_BLOCK`² tiles; edge tiles
/// may be partial.
fn structure_map(g: &LatentGrid) -> LatentGrid {
    let m = g.channel_mean();
    let (h, w) = (m.height(), m.width());
    let s = STRUCTURE_BLOCK;
    LatentGrid::from_fn(h.div_ceil(s), w.div_ceil(s), 1, |by, bx, _| {
        let mut best = f64::NEG_INFINITY;
        for y in by * s..((by + 1) * s).min(h) {
            for x in bx * s..((bx + 1) * s).min(w) {
                best = best.max(m.get(y, x, 0));
            }
        }
        best
    })
}

/// L2 distance between block-pooled channel-mean maps, divided by the number
/// of pooled entries.
pub fn structural_proxy(a: &LatentGrid, b: &LatentGrid) -> Result<f64> {
    a.check_same_shape(b, "structural_proxy")?;
    let (pa, pb) = (structure_map(a), structure_map(b));
    let d = pa.sub(&pb)?;
    Ok(d.norm_sq().sqrt() / d.len() as f64)
}

/// Log-likelihood of the region's content under a prompt's clean-image
/// mixture.
fn region_log_likelihood(y: &LatentGrid, region: &LatentGrid, prompt: &PromptSpec, world: &ToyWorld) -> Result<f64> {
    let mix = world.mixture(prompt)?;
    let ch = y.channels();
    let active: Vec<usize> = (0..region.pixels()).filter(|&p| region.as_slice()[p] != 0.0).collect();
    let n = (active.len() * ch) as f64;
    let terms: Vec<f64> = mix
        .components
        .iter()
        .map(|k| {
            let d2: f64 = active
                .iter()
                .map(|&p| {
                    y.pixel(p)
                        .iter()
                        .zip(k.mean.pixel(p))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .sum();
            k.log_weight - 0.5 * d2 / k.var - 0.5 * n * (2.0 * std::f64::consts::PI * k.var).ln()
        })
        .collect();
    Ok(log_sum_exp(&terms))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub source: f64,
    pub target: f64,
    /// `(source, target)` per edit mask.
    pub per_mask: Vec<(f64, f64)>,
}

/// Posterior of the target prompt against the source prompt for each masked
/// region's content, with equal priors and noise-free likelihoods.
pub fn fidelity_scores(
    y: &LatentGrid,
    ms: &MaskSet,
    source: &PromptSpec,
    targets: &[PromptSpec],
    world: &ToyWorld,
) -> Result<Fidelity> {
    if targets.len() != ms.n() {
        return Err(Error::invalid(format!("{} target prompts for {} masks", targets.len(), ms.n())));
    }
    if ms.n() == 0 {
        return Err(Error::UndefinedMetric("fidelity needs at least one edit mask".into()));
    }
    if y.shape() != world.shape() {
        return Err(Error::invalid("latent does not match the world shape"));
    }
    let mut per_mask = Vec::with_capacity(ms.n());
    for (i, target) in targets.iter().enumerate() {
        let region = ms.mask(i + 1);
        let ls = region_log_likelihood(y, region, source, world)?;
        let lt = region_log_likelihood(y, region, target, world)?;
        let z = log_sum_exp(&[ls, lt]);
        per_mask.push(((ls - z).exp(), (lt - z).exp()));
    }
    let n = per_mask.len() as f64;
    Ok(Fidelity {
        source: per_mask.iter().map(|p| p.0).sum::<f64>() / n,
        target: per_mask.iter().map(|p| p.1).sum::<f64>() / n,
        per_mask,
    })
}

/// Serializes `+∞` as the string `"inf"` and missing values as `null`.
pub(crate) mod metric_value {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Tag(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if x.is_infinite() && *x > 0.0 => s.serialize_str("inf"),
            Some(x) => x.serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(None),
            Some(Repr::Num(x)) => Ok(Some(x)),
            Some(Repr::Tag(t)) if t == "inf" => Ok(Some(f64::INFINITY)),
            Some(Repr::Tag(t)) => Err(serde::de::Error::custom(format!("unexpected metric value {t:?}"))),
        }
    }
}

/// Metrics of one edit. Undefined scores (no background, no edit masks)
/// are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    #[serde(with = "metric_value")]
    pub bg_psnr: Option<f64>,
    #[serde(with = "metric_value")]
    pub bg_ssim: Option<f64>,
    #[serde(with = "metric_value")]
    pub source_fidelity: Option<f64>,
    #[serde(with = "metric_value")]
    pub target_fidelity: Option<f64>,
    pub structural_proxy: f64,
    #[serde(default)]
    pub per_mask: Vec<(f64, f64)>,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Scores an edit: background metrics against the reconstruction, structure
/// against the input and prompt fidelity inside each mask.
pub fn compute_metrics(
    x0: &LatentGrid,
    edited: &LatentGrid,
    reconstruction: &LatentGrid,
    ms: &MaskSet,
    source: &PromptSpec,
    targets: &[PromptSpec],
    world: &ToyWorld,
) -> Result<MetricsRecord> {
    let m0 = ms.background();
    let bg_psnr = defined(bg_psnr(edited, reconstruction, m0))?;
    let bg_ssim = defined(bg_ssim(edited, reconstruction, m0))?;
    let structural_proxy = structural_proxy(x0, edited)?;
    let (source_fidelity, target_fidelity, per_mask) = match fidelity_scores(edited, ms, source, targets, world) {
        Ok(f) => (Some(f.source), Some(f.target), f.per_mask),
        Err(Error::UndefinedMetric(_)) => (None, None, Vec::new()),
        Err(e) => return Err(e),
    };
    Ok(MetricsRecord {
        bg_psnr,
        bg_ssim,
        source_fidelity,
        target_fidelity,
        structural_proxy,
        per_mask,
    })
}
