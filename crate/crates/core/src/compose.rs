//! Mask bookkeeping, the fused multi-branch denoising step and background
//! bootstrapping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{is_binary_mask, LatentGrid, SeededRng};
use crate::schedule::{ddpm_forward, NoiseSchedule};

pub const DEFAULT_BOOTSTRAP_STEPS: usize = 10;

const BG_COLOR_STREAM: u64 = 0xb0;
const BG_NOISE_STREAM: u64 = 0xb1 << 32;

/// `N` edit masks plus the derived background `M_0` and per-pixel weights.
///
/// Index 0 of [`MaskSet::mask`] and [`MaskSet::weight`] is the background.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    masks: Vec<LatentGrid>,
    weights: Vec<LatentGrid>,
}

impl MaskSet {
    /// Number of edit masks (not counting the background).
    pub fn n(&self) -> usize {
        self.masks.len() - 1
    }

    pub fn height(&self) -> usize {
        self.masks[0].height()
    }

    pub fn width(&self) -> usize {
        self.masks[0].width()
    }

    pub fn mask(&self, i: usize) -> &LatentGrid {
        &self.masks[i]
    }

    pub fn background(&self) -> &LatentGrid {
        &self.masks[0]
    }

    pub fn weight(&self, i: usize) -> &LatentGrid {
        &self.weights[i]
    }

    pub fn edit_masks(&self) -> &[LatentGrid] {
        &self.masks[1..]
    }

    /// Keeps only edit mask `i` (1-based), recomputing the background.
    pub fn single(&self, i: usize) -> Result<MaskSet> {
        build_mask_set(self.height(), self.width(), std::slice::from_ref(&self.masks[i]))
    }
}

/// Derives `M_0 = 1 − ⋃ M_i` and weights `W_i = M_i / Σ_j M_j`.
///
/// At a pixel covered by `k` masks the first `k − 1` covering weights are
/// `1/k` and the last takes the remainder, so summing `W_0..W_N` in index
/// order gives exactly `1.0`.
pub fn build_mask_set(height: usize, width: usize, masks: &[LatentGrid]) -> Result<MaskSet> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("mask set needs a non-empty grid"));
    }
    for (i, m) in masks.iter().enumerate() {
        if m.height() != height || m.width() != width || m.channels() != 1 {
            return Err(Error::invalid(format!(
                "mask {} has shape {:?}, expected ({height}, {width}, 1)",
                i + 1,
                m.shape()
            )));
        }
        if !is_binary_mask(m) {
            return Err(Error::invalid(format!("mask {} has entries outside {{0, 1}}", i + 1)));
        }
    }
    let mut all = Vec::with_capacity(masks.len() + 1);
    let m0 = LatentGrid::from_fn(height, width, 1, |y, x, _| {
        if masks.iter().any(|m| m.get(y, x, 0) == 1.0) {
            0.0
        } else {
            1.0
        }
    });
    all.push(m0);
    all.extend(masks.iter().cloned());

    let mut weights = vec![LatentGrid::zeros(height, width, 1); all.len()];
    let mut covering = Vec::with_capacity(all.len());
    for p in 0..height * width {
        covering.clear();
        covering.extend((0..all.len()).filter(|&i| all[i].as_slice()[p] == 1.0));
        let k = covering.len();
        let share = 1.0 / k as f64;
        let mut used = 0.0;
        for (n, &i) in covering.iter().enumerate() {
            let w = if n + 1 == k { 1.0 - used } else { share };
            used += w;
            weights[i].as_mut_slice()[p] = w;
        }
    }
    Ok(MaskSet { masks: all, weights })
}

/// Per-branch denoised latents `Φ(x_t^i | c_i)`, background first.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutputs {
    outputs: Vec<LatentGrid>,
}

impl BranchOutputs {
    pub fn new(outputs: Vec<LatentGrid>) -> Result<Self> {
        let first = outputs
            .first()
            .ok_or_else(|| Error::invalid("branch outputs need at least the background branch"))?;
        if outputs.iter().any(|o| o.shape() != first.shape()) {
            return Err(Error::invalid("branch outputs disagree in shape"));
        }
        Ok(Self { outputs })
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn get(&self, i: usize) -> &LatentGrid {
        &self.outputs[i]
    }

    pub fn as_slice(&self) -> &[LatentGrid] {
        &self.outputs
    }

    fn check(&self, ms: &MaskSet) -> Result<()> {
        if self.outputs.len() != ms.n() + 1 {
            return Err(Error::invalid(format!(
                "{} branch outputs for {} masks (+ background)",
                self.outputs.len(),
                ms.n()
            )));
        }
        let o = &self.outputs[0];
        if o.height() != ms.height() || o.width() != ms.width() {
            return Err(Error::invalid("branch outputs do not match mask dims"));
        }
        Ok(())
    }
}

/// `Σ_i ‖M_i ⊗ (y − Φ_i)‖²`.
pub fn l_md(y_prev: &LatentGrid, branches: &BranchOutputs, ms: &MaskSet) -> Result<f64> {
    branches.check(ms)?;
    y_prev.check_same_shape(branches.get(0), "l_md")?;
    let mut acc = 0.0;
    for (i, phi) in branches.as_slice().iter().enumerate() {
        let m = ms.mask(i).as_slice();
        for p in 0..y_prev.pixels() {
            if m[p] != 0.0 {
                acc += y_prev
                    .pixel(p)
                    .iter()
                    .zip(phi.pixel(p))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            }
        }
    }
    Ok(acc)
}

/// The per-pixel minimizer of [`l_md`]: a `W_i`-weighted blend of branches.
///
/// Written as the first covering branch plus weighted differences so that
/// agreeing branches, single coverage and disjoint masks reproduce the
/// branch values exactly.
pub fn psi_step(branches: &BranchOutputs, ms: &MaskSet) -> Result<LatentGrid> {
    branches.check(ms)?;
    let base = branches.get(0);
    let mut out = LatentGrid::zeros(base.height(), base.width(), base.channels());
    let n = branches.len();
    for p in 0..base.pixels() {
        let first = (0..n)
            .find(|&i| ms.weight(i).as_slice()[p] != 0.0)
            .expect("every pixel is covered");
        let anchor = branches.get(first).pixel(p);
        let o = out.pixel_mut(p);
        o.copy_from_slice(anchor);
        for i in first + 1..n {
            let w = ms.weight(i).as_slice()[p];
            if w == 0.0 {
                continue;
            }
            for ((o, &v), &a) in o.iter_mut().zip(branches.get(i).pixel(p)).zip(anchor) {
                *o += w * (v - a);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderMode {
    #[default]
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub t_b: usize,
    pub seed: u64,
    #[serde(default)]
    pub encoder: EncoderMode,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            t_b: DEFAULT_BOOTSTRAP_STEPS,
            seed: 0,
            encoder: EncoderMode::Identity,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.t_b > steps {
            return Err(Error::invalid(format!(
                "bootstrap steps {} exceed the {steps} inference steps",
                self.t_b
            )));
        }
        Ok(())
    }
}

/// The clean constant-colour background image, one value per channel in
/// `[−1, 1]`.
pub fn background_color(cfg: &BootstrapConfig, shape: (usize, usize, usize)) -> LatentGrid {
    let mut rng = SeededRng::new(cfg.seed, BG_COLOR_STREAM);
    let color: Vec<f64> = (0..shape.2).map(|_| rng.uniform(-1.0, 1.0)).collect();
    LatentGrid::from_fn(shape.0, shape.1, shape.2, |_, _, c| color[c])
}

/// `b_t`: the constant-colour background noised to timestep `t`.
///
/// The noise is seeded per timestep, so `b_t` does not depend on which other
/// timesteps were requested.
pub fn make_background_bt(
    t: usize,
    cfg: &BootstrapConfig,
    shape: (usize, usize, usize),
    sched: &NoiseSchedule,
) -> Result<LatentGrid> {
    let b0 = background_color(cfg, shape);
    if t == 0 {
        return Ok(b0);
    }
    let mut rng = SeededRng::new(cfg.seed, BG_NOISE_STREAM + t as u64);
    let eps = LatentGrid::standard_normal(shape.0, shape.1, shape.2, &mut rng);
    ddpm_forward(&b0, t, &eps, sched)
}

/// `M ⊙ y + (1 − M) ⊙ b` during the first `t_b` denoising iterations.
pub fn bootstrap_latent(
    y_t: &LatentGrid,
    mask: &LatentGrid,
    b_t: &LatentGrid,
    step_index: usize,
    t_b: usize,
) -> Result<LatentGrid> {
    y_t.check_same_shape(b_t, "bootstrap_latent")?;
    y_t.check_mask(mask, "bootstrap_latent")?;
    if step_index >= t_b {
        return Ok(y_t.clone());
    }
    let mut out = y_t.clone();
    for p in 0..y_t.pixels() {
        if mask.as_slice()[p] == 0.0 {
            out.pixel_mut(p).copy_from_slice(b_t.pixel(p));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_schedule, ScheduleKind};

    fn rect(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> LatentGrid {
        LatentGrid::from_fn(h, w, 1, |y, x, _| {
            if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
                1.0
            } else {
                0.0
            }
        })
    }

    fn noise(h: usize, w: usize, c: usize, seed: u64) -> LatentGrid {
        let mut rng = SeededRng::new(seed, 0);
        LatentGrid::standard_normal(h, w, c, &mut rng)
    }

    #[test]
    fn empty_and_full_mask_sets() {
        let ms = build_mask_set(3, 4, &[]).unwrap();
        assert_eq!(ms.n(), 0);
        assert!(ms.background().as_slice().iter().all(|&v| v == 1.0));
        assert!(ms.weight(0).as_slice().iter().all(|&v| v == 1.0));
        let ms = build_mask_set(3, 4, &[LatentGrid::filled(3, 4, 1, 1.0)]).unwrap();
        assert!(ms.background().as_slice().iter().all(|&v| v == 0.0));
        assert!(ms.weight(1).as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn overlap_weights_by_enumeration() {
        let a = rect(4, 4, 0, 3, 0, 3);
        let b = rect(4, 4, 1, 4, 1, 4);
        let ms = build_mask_set(4, 4, &[a.clone(), b.clone()]).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let (ia, ib) = (a.get(y, x, 0), b.get(y, x, 0));
                let m0 = if ia + ib > 0.0 { 0.0 } else { 1.0 };
                let total = m0 + ia + ib;
                assert_eq!(ms.weight(0).get(y, x, 0), m0 / total);
                assert_eq!(ms.weight(1).get(y, x, 0), ia / total);
                assert_eq!(ms.weight(2).get(y, x, 0), ib / total);
            }
        }
        assert_eq!(ms.weight(1).get(1, 1, 0), 0.5);
    }

    #[test]
    fn rejects_non_binary_and_misshaped() {
        let mut m = LatentGrid::zeros(2, 2, 1);
        m.set(0, 0, 0, 0.5);
        assert!(matches!(build_mask_set(2, 2, &[m]), Err(Error::InvalidArgument(_))));
        assert!(build_mask_set(2, 2, &[LatentGrid::zeros(2, 3, 1)]).is_err());
        assert!(build_mask_set(2, 2, &[LatentGrid::zeros(2, 2, 2)]).is_err());
    }

    #[test]
    fn weights_sum_to_one_bitwise_for_many_overlaps() {
        for k in 1..=12 {
            let masks = vec![LatentGrid::filled(1, 1, 1, 1.0); k];
            let ms = build_mask_set(1, 1, &masks).unwrap();
            let s = (0..=k).fold(0.0, |acc, i| acc + ms.weight(i).as_slice()[0]);
            assert_eq!(s, 1.0, "k={k}");
        }
    }

    #[test]
    fn l_md_examples() {
        let phi = noise(3, 3, 2, 1);
        let ms = build_mask_set(3, 3, &[LatentGrid::filled(3, 3, 1, 1.0)]).unwrap();
        let br = BranchOutputs::new(vec![noise(3, 3, 2, 2), phi.clone()]).unwrap();
        assert_eq!(l_md(&phi, &br, &ms).unwrap(), 0.0);
        let mut y = phi.clone();
        for i in [0, 5, 9, 17] {
            y.as_mut_slice()[i] += 1.0;
        }
        assert!((l_md(&y, &br, &ms).unwrap() - 4.0).abs() < 1e-12);
        let same = BranchOutputs::new(vec![phi.clone(), phi.clone()]).unwrap();
        assert_eq!(l_md(&phi, &same, &ms).unwrap(), 0.0);
    }

    #[test]
    fn psi_examples() {
        let ms = build_mask_set(4, 4, &[LatentGrid::filled(4, 4, 1, 1.0)]).unwrap();
        let b = BranchOutputs::new(vec![noise(4, 4, 2, 1), noise(4, 4, 2, 2)]).unwrap();
        assert_eq!(psi_step(&b, &ms).unwrap(), *b.get(1));

        let ms = build_mask_set(4, 4, &[rect(4, 4, 0, 2, 0, 4)]).unwrap();
        let out = psi_step(&b, &ms).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let src = if y < 2 { b.get(1) } else { b.get(0) };
                for c in 0..2 {
                    assert_eq!(out.get(y, x, c), src.get(y, x, c));
                }
            }
        }
    }

    /// Per-pixel weighted least squares solved directly: `Σ M_i Φ_i / Σ M_i`.
    fn least_squares_oracle(b: &BranchOutputs, ms: &MaskSet) -> LatentGrid {
        let g = b.get(0);
        LatentGrid::from_fn(g.height(), g.width(), g.channels(), |y, x, c| {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..b.len() {
                let m = ms.mask(i).get(y, x, 0);
                num += m * b.get(i).get(y, x, c);
                den += m;
            }
            num / den
        })
    }

    #[test]
    fn psi_matches_least_squares_and_beats_probes() {
        let masks = vec![rect(6, 6, 0, 4, 0, 4), rect(6, 6, 2, 6, 2, 6), rect(6, 6, 1, 3, 1, 5)];
        let ms = build_mask_set(6, 6, &masks).unwrap();
        let b = BranchOutputs::new((0..4).map(|s| noise(6, 6, 3, s)).collect()).unwrap();
        let psi = psi_step(&b, &ms).unwrap();
        assert!(psi.max_abs_diff(&least_squares_oracle(&b, &ms)).unwrap() < 1e-12);
        let best = l_md(&psi, &b, &ms).unwrap();
        let mut rng = SeededRng::new(3, 3);
        for _ in 0..100 {
            let d = LatentGrid::standard_normal(6, 6, 3, &mut rng).scale(0.05);
            assert!(best <= l_md(&psi.add(&d).unwrap(), &b, &ms).unwrap());
        }
    }

    #[test]
    fn psi_idempotent_on_agreement() {
        let masks = vec![rect(5, 5, 0, 3, 0, 3), rect(5, 5, 1, 5, 2, 5)];
        let ms = build_mask_set(5, 5, &masks).unwrap();
        let g = noise(5, 5, 2, 4);
        let b = BranchOutputs::new(vec![g.clone(); 3]).unwrap();
        assert_eq!(psi_step(&b, &ms).unwrap(), g);
    }

    #[test]
    fn psi_shape_checks() {
        let ms = build_mask_set(3, 3, &[rect(3, 3, 0, 1, 0, 1)]).unwrap();
        let b = BranchOutputs::new(vec![noise(3, 3, 1, 0)]).unwrap();
        assert!(psi_step(&b, &ms).is_err());
        assert!(BranchOutputs::new(vec![noise(3, 3, 1, 0), noise(3, 2, 1, 0)]).is_err());
    }

    #[test]
    fn background_examples() {
        let s = make_schedule(1000, ScheduleKind::LinearBeta).unwrap();
        let cfg = BootstrapConfig {
            seed: 17,
            ..BootstrapConfig::default()
        };
        let b0 = make_background_bt(0, &cfg, (3, 3, 2), &s).unwrap();
        assert!(b0.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(b0.get(0, 0, 1), b0.get(2, 1, 1));
        assert_eq!(
            make_background_bt(400, &cfg, (3, 3, 2), &s).unwrap(),
            make_background_bt(400, &cfg, (3, 3, 2), &s).unwrap()
        );
    }

    #[test]
    fn background_noise_variance() {
        let s = make_schedule(1000, ScheduleKind::LinearBeta).unwrap();
        let t = 500;
        let a = s.alpha_bar(t);
        let mut acc = 0.0;
        let mut n = 0.0;
        for seed in 0..1000 {
            let cfg = BootstrapConfig {
                seed,
                ..BootstrapConfig::default()
            };
            let bt = make_background_bt(t, &cfg, (2, 2, 2), &s).unwrap();
            let b0 = background_color(&cfg, (2, 2, 2));
            for (x, c) in bt.as_slice().iter().zip(b0.as_slice()) {
                let r = x - a.sqrt() * c;
                acc += r * r;
                n += 1.0;
            }
        }
        let var = acc / n;
        assert!((var - (1.0 - a)).abs() <= 0.05 * (1.0 - a), "{var}");
    }

    #[test]
    fn bootstrap_examples() {
        let y = noise(4, 4, 2, 1);
        let b = noise(4, 4, 2, 2);
        let checker = LatentGrid::from_fn(4, 4, 1, |y, x, _| ((y + x) % 2) as f64);
        assert_eq!(bootstrap_latent(&y, &checker, &b, 10, 10).unwrap(), y);
        assert_eq!(bootstrap_latent(&y, &LatentGrid::filled(4, 4, 1, 1.0), &b, 0, 10).unwrap(), y);
        let out = bootstrap_latent(&y, &checker, &b, 0, 10).unwrap();
        for yy in 0..4 {
            for x in 0..4 {
                let src = if (yy + x) % 2 == 1 { &y } else { &b };
                for c in 0..2 {
                    assert_eq!(out.get(yy, x, c), src.get(yy, x, c));
                }
            }
        }
        assert_eq!(bootstrap_latent(&out, &checker, &b, 0, 10).unwrap(), out);
        assert!(bootstrap_latent(&y, &checker, &noise(4, 3, 2, 0), 0, 10).is_err());
    }
}
