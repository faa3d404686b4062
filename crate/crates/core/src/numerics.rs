//! Grid arithmetic shared by every stage of the engine.
//!
//! Grids are stored row-major in `(y, x, c)` order. Masks are single-channel
//! grids whose entries are exactly `0.0` or `1.0`; they broadcast across the
//! channels of the grid they are applied to.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// An `H × W × C` latent grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl LatentGrid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "grid dims must be positive");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "grid dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "grid data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("grid contains a non-finite value"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a grid by evaluating `f(y, x, c)` at every entry.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut g = Self::zeros(height, width, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let i = g.index(y, x, c);
                    g.data[i] = f(y, x, c);
                }
            }
        }
        g
    }

    /// Fills a grid with standard-normal draws.
    pub fn standard_normal(height: usize, width: usize, channels: usize, rng: &mut SeededRng) -> Self {
        let mut g = Self::zeros(height, width, channels);
        for v in &mut g.data {
            *v = rng.normal();
        }
        g
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// The channel vector at pixel `p` (flat pixel index).
    #[inline]
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.data[p * c..(p + 1) * c]
    }

    pub fn same_shape(&self, other: &LatentGrid) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn check_same_shape(&self, other: &LatentGrid, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    /// Checks that `mask` is a single-channel grid matching this grid spatially.
    pub(crate) fn check_mask(&self, mask: &LatentGrid, what: &str) -> Result<()> {
        if mask.channels != 1 || mask.height != self.height || mask.width != self.width {
            return Err(Error::invalid(format!(
                "{what}: mask shape {:?} does not broadcast over grid {:?}",
                mask.shape(),
                self.shape()
            )));
        }
        Ok(())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::numeric(format!("{what}: non-finite value at flat index {i}"))),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentGrid {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &LatentGrid, f: impl Fn(f64, f64) -> f64) -> Result<LatentGrid> {
        self.check_same_shape(other, "zip_map")?;
        Ok(self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn sub(&self, other: &LatentGrid) -> Result<LatentGrid> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &LatentGrid) -> Result<LatentGrid> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, k: f64) -> LatentGrid {
        self.map(|v| v * k)
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: f64, other: &LatentGrid) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &LatentGrid) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Per-pixel mean over channels, as a single-channel grid.
    pub fn channel_mean(&self) -> LatentGrid {
        let mut out = LatentGrid::zeros(self.height, self.width, 1);
        let c = self.channels as f64;
        for p in 0..self.pixels() {
            out.data[p] = self.pixel(p).iter().sum::<f64>() / c;
        }
        out
    }

    fn with_data(&self, data: Vec<f64>) -> LatentGrid {
        debug_assert_eq!(data.len(), self.data.len());
        LatentGrid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
        }
    }
}

/// Deterministic random source keyed by `(seed, stream)`.
///
/// Backed by ChaCha8, which exposes an independent stream per stream id, so
/// every pipeline branch can draw from its own sequence without depending on
/// call order in other branches.
#[derive(Debug)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A fresh generator on another stream of the same seed.
    pub fn fork(&self, stream: u64) -> SeededRng {
        SeededRng::new(self.seed, stream)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.random_bool(p)
    }
}

/// Max-pooled copies of a noise map; level `p` has spatial size `S_0 / 2^p`.
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub levels: Vec<LatentGrid>,
}

/// Temperature-scaled softmax. Ties in the logits keep equal mass.
pub fn softmax_tau(z: &[f64], tau: f64) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::invalid("softmax_tau: empty input"));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("softmax_tau: tau must be positive, got {tau}")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("softmax_tau: non-finite logit"));
    }
    let mut out = vec![0.0; z.len()];
    softmax_tau_into(z, tau, &mut out);
    Ok(out)
}

/// Unchecked kernel used on hot paths after validation.
pub(crate) fn softmax_tau_into(z: &[f64], tau: f64, out: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = ((v - m) / tau).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Log of `Σ exp(v)`, stable for large magnitudes.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// 2×2 max-pool. Also returns, for every output entry, the flat input index
/// that won the block (lowest index on ties) for gradient routing.
pub(crate) fn max_pool_2x2(g: &LatentGrid) -> (LatentGrid, Vec<usize>) {
    let (h, w, c) = g.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = LatentGrid::zeros(oh, ow, c);
    let mut winners = vec![0usize; oh * ow * c];
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let mut best = g.index(2 * y, 2 * x, ch);
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = g.index(2 * y + dy, 2 * x + dx, ch);
                    if g.data[i] > g.data[best] {
                        best = i;
                    }
                }
                let o = out.index(y, x, ch);
                out.data[o] = g.data[best];
                winners[o] = best;
            }
        }
    }
    (out, winners)
}

pub(crate) fn check_pyramid_dims(g: &LatentGrid, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::invalid("pyramid needs at least one level"));
    }
    let factor = 1usize
        .checked_shl(levels as u32 - 1)
        .ok_or_else(|| Error::invalid("too many pyramid levels"))?;
    if g.height() % factor != 0 || g.width() % factor != 0 {
        return Err(Error::invalid(format!(
            "spatial dims {}x{} not divisible by 2^{} for {levels} pyramid levels",
            g.height(),
            g.width(),
            levels - 1
        )));
    }
    Ok(())
}

/// Builds the max-pool pyramid; level 0 is `eta0` itself.
pub fn max_pool_pyramid(eta0: &LatentGrid, levels: usize) -> Result<Pyramid> {
    check_pyramid_dims(eta0, levels)?;
    let mut out = Vec::with_capacity(levels);
    out.push(eta0.clone());
    for _ in 1..levels {
        let (next, _) = max_pool_2x2(out.last().expect("non-empty"));
        out.push(next);
    }
    Ok(Pyramid { levels: out })
}

/// Population mean and variance over every entry.
pub fn mean_var(grid: &LatentGrid) -> (f64, f64) {
    // Welford keeps this single-pass without the cancellation of Σx² − nμ².
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &v) in grid.as_slice().iter().enumerate() {
        let delta = v - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (v - mean);
    }
    (mean, m2 / grid.len() as f64)
}

/// `sqrt(Σ mask · value²)`, with the mask broadcast across channels.
pub fn masked_l2(grid: &LatentGrid, mask: &LatentGrid) -> Result<f64> {
    Ok(masked_sum_sq(grid, mask)?.sqrt())
}

pub(crate) fn masked_sum_sq(grid: &LatentGrid, mask: &LatentGrid) -> Result<f64> {
    grid.check_mask(mask, "masked_l2")?;
    let mut acc = 0.0;
    for p in 0..grid.pixels() {
        if mask.data[p] != 0.0 {
            acc += grid.pixel(p).iter().map(|v| v * v).sum::<f64>();
        }
    }
    Ok(acc)
}

pub(crate) fn is_binary_mask(mask: &LatentGrid) -> bool {
    mask.channels() == 1 && mask.as_slice().iter().all(|&v| v == 0.0 || v == 1.0)
}
