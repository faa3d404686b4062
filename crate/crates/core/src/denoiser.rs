//! Noise prediction over prompt-conditioned Gaussian-mixture worlds, and the
//! cross-attention read-out head.
//!
//! Each token of a [`ToyWorld`] owns a small mixture of isotropic Gaussians
//! over whole latent grids. A prompt's image distribution is the Cartesian
//! mixture of its non-null tokens: component means add, variances add and
//! weights multiply. Because every component is Gaussian, the posterior mean
//! `E[x_0 | x_t, c]` and therefore the Bayes-optimal noise prediction are
//! available in closed form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, softmax_tau_into, LatentGrid, SeededRng};
use crate::schedule::{ddim_denoise_step, NoiseSchedule, StepIndexMap};

pub const NULL_TOKEN: usize = 0;
pub const DEFAULT_PROMPT_LEN: usize = 4;
pub const MAX_MIXTURE_COMPONENTS: usize = 16;
pub const NULL_STD: f64 = 3.0;
pub const TIME_EMBED_DIM: usize = 8;

/// Stream used for the initial latent of [`sample`].
const SAMPLE_STREAM: u64 = 0x5a;

/// A fixed-length token sequence, padded with [`NULL_TOKEN`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSpec {
    pub tokens: Vec<usize>,
    #[serde(default)]
    pub label: String,
}

impl PromptSpec {
    /// Pads `tokens` with nulls up to `len`.
    pub fn new(tokens: &[usize], len: usize, label: impl Into<String>) -> Result<Self> {
        if tokens.len() > len {
            return Err(Error::invalid(format!(
                "prompt has {} tokens but the prompt length is {len}",
                tokens.len()
            )));
        }
        let mut padded = tokens.to_vec();
        padded.resize(len, NULL_TOKEN);
        Ok(Self {
            tokens: padded,
            label: label.into(),
        })
    }

    /// The null condition: every slot holds the null token.
    pub fn null(len: usize) -> Self {
        Self {
            tokens: vec![NULL_TOKEN; len],
            label: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_null(&self) -> bool {
        self.tokens.iter().all(|&t| t == NULL_TOKEN)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub std: f64,
    pub mean: LatentGrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub label: String,
    pub components: Vec<Component>,
}

/// A vocabulary of tokens with per-token Gaussian-mixture image priors.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyWorld {
    shape: (usize, usize, usize),
    prompt_len: usize,
    tokens: Vec<Token>,
}

impl ToyWorld {
    /// `tokens[0]` must be the null token. Use [`ToyWorld::null_token`] for the
    /// default broad prior.
    pub fn new(shape: (usize, usize, usize), prompt_len: usize, tokens: Vec<Token>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("world needs at least the null token"));
        }
        if prompt_len == 0 {
            return Err(Error::invalid("prompt length must be positive"));
        }
        for (id, tok) in tokens.iter().enumerate() {
            if tok.components.is_empty() {
                return Err(Error::invalid(format!("token {id} has no components")));
            }
            let total: f64 = tok.components.iter().map(|c| c.weight).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "token {id} weights sum to {total}, expected 1"
                )));
            }
            for comp in &tok.components {
                if !(comp.weight > 0.0) {
                    return Err(Error::invalid(format!("token {id} has a non-positive weight")));
                }
                if !(comp.std > 0.0) || !comp.std.is_finite() {
                    return Err(Error::invalid(format!("token {id} has a non-positive std")));
                }
                if comp.mean.shape() != shape {
                    return Err(Error::invalid(format!(
                        "token {id} mean has shape {:?}, world shape is {shape:?}",
                        comp.mean.shape()
                    )));
                }
            }
        }
        Ok(Self {
            shape,
            prompt_len,
            tokens,
        })
    }

    /// Zero-mean broad prior used for the null condition.
    pub fn null_token(shape: (usize, usize, usize)) -> Token {
        Token {
            label: "<null>".into(),
            components: vec![Component {
                weight: 1.0,
                std: NULL_STD,
                mean: LatentGrid::zeros(shape.0, shape.1, shape.2),
            }],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> Option<&Token> {
        self.tokens.get(id)
    }

    /// Looks a token up by its label.
    pub fn token_id(&self, label: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t.label == label)
    }

    pub fn prompt(&self, tokens: &[usize], label: impl Into<String>) -> Result<PromptSpec> {
        let p = PromptSpec::new(tokens, self.prompt_len, label)?;
        self.check_prompt(&p)?;
        Ok(p)
    }

    pub fn null_prompt(&self) -> PromptSpec {
        PromptSpec::null(self.prompt_len)
    }

    pub fn check_prompt(&self, c: &PromptSpec) -> Result<()> {
        if c.len() != self.prompt_len {
            return Err(Error::invalid(format!(
                "prompt length {} does not match world prompt length {}",
                c.len(),
                self.prompt_len
            )));
        }
        if let Some(&bad) = c.tokens.iter().find(|&&t| t >= self.tokens.len()) {
            return Err(Error::invalid(format!(
                "unknown token id {bad} (vocabulary size {})",
                self.tokens.len()
            )));
        }
        Ok(())
    }

    /// The composed image distribution for a prompt.
    pub fn mixture(&self, c: &PromptSpec) -> Result<Mixture> {
        self.check_prompt(c)?;
        let (h, w, ch) = self.shape;
        let active: Vec<usize> = c.tokens.iter().copied().filter(|&t| t != NULL_TOKEN).collect();
        let active = if active.is_empty() { vec![NULL_TOKEN] } else { active };

        let mut parts: Vec<(f64, f64, LatentGrid)> = vec![(1.0, 0.0, LatentGrid::zeros(h, w, ch))];
        for id in active {
            let mut next = Vec::with_capacity(parts.len() * self.tokens[id].components.len());
            for (weight, var, mean) in &parts {
                for comp in &self.tokens[id].components {
                    let m = mean.add(&comp.mean)?;
                    next.push((weight * comp.weight, var + comp.std * comp.std, m));
                }
            }
            parts = next;
        }
        if parts.len() > MAX_MIXTURE_COMPONENTS {
            // keep the heaviest components; stable so ties keep product order
            parts.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite weights"));
            parts.truncate(MAX_MIXTURE_COMPONENTS);
        }
        let total: f64 = parts.iter().map(|p| p.0).sum();
        Ok(Mixture {
            components: parts
                .into_iter()
                .map(|(weight, var, mean)| MixtureComponent {
                    log_weight: (weight / total).ln(),
                    var,
                    mean,
                })
                .collect(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct MixtureComponent {
    pub log_weight: f64,
    /// Per-entry variance `s²` of the clean image around `mean`.
    pub var: f64,
    pub mean: LatentGrid,
}

/// A Gaussian mixture over whole latent grids.
#[derive(Clone, Debug)]
pub struct Mixture {
    pub components: Vec<MixtureComponent>,
}

impl Mixture {
    /// Log-likelihood of `x_t` under each component's noised marginal
    /// `N(√ᾱ μ_k, (ᾱ s_k² + 1 − ᾱ) I)`, including the log weight.
    pub fn log_joint(&self, x_t: &LatentGrid, alpha_bar: f64) -> Result<Vec<f64>> {
        let sa = alpha_bar.sqrt();
        let n = x_t.len() as f64;
        self.components
            .iter()
            .map(|k| {
                x_t.check_same_shape(&k.mean, "mixture likelihood")?;
                let var = alpha_bar * k.var + (1.0 - alpha_bar);
                let d2: f64 = x_t
                    .as_slice()
                    .iter()
                    .zip(k.mean.as_slice())
                    .map(|(x, m)| {
                        let d = x - sa * m;
                        d * d
                    })
                    .sum();
                Ok(k.log_weight - 0.5 * n * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * d2 / var)
            })
            .collect()
    }

    /// Posterior component probabilities given `x_t`.
    pub fn responsibilities(&self, x_t: &LatentGrid, alpha_bar: f64) -> Result<Vec<f64>> {
        let lj = self.log_joint(x_t, alpha_bar)?;
        let z = log_sum_exp(&lj);
        Ok(lj.iter().map(|v| (v - z).exp()).collect())
    }

    /// `E[x_0 | x_t]` under the mixture.
    pub fn posterior_mean(&self, x_t: &LatentGrid, alpha_bar: f64) -> Result<LatentGrid> {
        let r = self.responsibilities(x_t, alpha_bar)?;
        let sa = alpha_bar.sqrt();
        let mut out = LatentGrid::zeros(x_t.height(), x_t.width(), x_t.channels());
        for (k, &rk) in self.components.iter().zip(&r) {
            if rk == 0.0 {
                continue;
            }
            let var = alpha_bar * k.var + (1.0 - alpha_bar);
            let gain = sa * k.var / var;
            for ((o, &x), &m) in out
                .as_mut_slice()
                .iter_mut()
                .zip(x_t.as_slice())
                .zip(k.mean.as_slice())
            {
                *o += rk * (m + gain * (x - sa * m));
            }
        }
        Ok(out)
    }

    /// Bayes-optimal noise estimate `(x_t − √ᾱ E[x_0|x_t]) / √(1 − ᾱ)`.
    pub fn predict_noise(&self, x_t: &LatentGrid, t: usize, sched: &NoiseSchedule) -> Result<LatentGrid> {
        if t == 0 || t > sched.total() {
            return Err(Error::invalid(format!(
                "predict_noise needs 1 <= t <= {}, got {t}",
                sched.total()
            )));
        }
        let a = sched.alpha_bar(t);
        let mean = self.posterior_mean(x_t, a)?;
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        let eps = x_t.zip_map(&mean, |x, m| (x - sa * m) / sn)?;
        eps.ensure_finite("predict_noise")?;
        Ok(eps)
    }
}

/// Conditional and unconditional mixtures bundled with a guidance scale.
#[derive(Clone, Debug)]
pub struct Conditioner {
    cond: Mixture,
    uncond: Option<Mixture>,
    scale: f64,
}

impl Conditioner {
    pub fn new(world: &ToyWorld, c: &PromptSpec, scale: f64) -> Result<Self> {
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(Error::invalid(format!("guidance scale must be >= 0, got {scale}")));
        }
        let cond = world.mixture(c)?;
        let uncond = if scale == 1.0 {
            None
        } else {
            Some(world.mixture(&world.null_prompt())?)
        };
        Ok(Self { cond, uncond, scale })
    }

    pub fn predict(&self, x_t: &LatentGrid, t: usize, sched: &NoiseSchedule) -> Result<LatentGrid> {
        let Some(uncond) = &self.uncond else {
            return self.cond.predict_noise(x_t, t, sched);
        };
        let eu = uncond.predict_noise(x_t, t, sched)?;
        if self.scale == 0.0 {
            return Ok(eu);
        }
        let ec = self.cond.predict_noise(x_t, t, sched)?;
        let w = self.scale;
        eu.zip_map(&ec, |u, c| u + w * (c - u))
    }
}

/// Noise prediction `ε_θ(x_t, t, c)` for a world.
pub fn predict_noise(
    x_t: &LatentGrid,
    t: usize,
    c: &PromptSpec,
    world: &ToyWorld,
    sched: &NoiseSchedule,
) -> Result<LatentGrid> {
    world.mixture(c)?.predict_noise(x_t, t, sched)
}

/// Classifier-free combination `ε(⊘) + w (ε(c) − ε(⊘))`.
pub fn guided_noise(
    x_t: &LatentGrid,
    t: usize,
    c: &PromptSpec,
    w: f64,
    world: &ToyWorld,
    sched: &NoiseSchedule,
) -> Result<LatentGrid> {
    Conditioner::new(world, c, w)?.predict(x_t, t, sched)
}

/// Plain DDIM sampling from a seeded standard-normal start.
pub fn sample(
    c: &PromptSpec,
    seed: u64,
    steps: usize,
    world: &ToyWorld,
    sched: &NoiseSchedule,
) -> Result<LatentGrid> {
    if steps == 0 {
        return Err(Error::invalid("sample needs at least one step"));
    }
    let map = StepIndexMap::uniform(sched.total(), steps)?;
    let mix = world.mixture(c)?;
    let (h, w, ch) = world.shape();
    let mut rng = SeededRng::new(seed, SAMPLE_STREAM);
    let mut x = LatentGrid::standard_normal(h, w, ch, &mut rng);
    for (t, t_prev) in map.denoise_pairs() {
        let eps = mix.predict_noise(&x, t, sched)?;
        x = ddim_denoise_step(&x, &eps, t, t_prev, sched)?;
    }
    Ok(x)
}

/// Sinusoidal embedding of `t / T` with frequencies `2^0 .. 2^7`.
pub fn time_embedding(t: usize, t_total: usize) -> [f64; TIME_EMBED_DIM] {
    let u = t as f64 / t_total.max(1) as f64;
    let mut out = [0.0; TIME_EMBED_DIM];
    for (k, o) in out.iter_mut().enumerate() {
        *o = ((1u32 << k) as f64 * u).sin();
    }
    out
}

/// Per-pixel distribution over the `L` prompt slots.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    height: usize,
    width: usize,
    tokens: usize,
    values: Vec<f64>,
    tau: f64,
}

impl AttentionMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Attention row of pixel `p` over the prompt slots.
    pub fn row(&self, p: usize) -> &[f64] {
        &self.values[p * self.tokens..(p + 1) * self.tokens]
    }

    pub fn get(&self, y: usize, x: usize, token: usize) -> f64 {
        self.values[(y * self.width + x) * self.tokens + token]
    }

    pub fn same_dims(&self, other: &AttentionMap) -> bool {
        (self.height, self.width, self.tokens) == (other.height, other.width, other.tokens)
    }

    /// Builds a map from raw values; rows must be probability vectors.
    pub fn from_values(height: usize, width: usize, tokens: usize, values: Vec<f64>, tau: f64) -> Result<Self> {
        if values.len() != height * width * tokens || tokens == 0 {
            return Err(Error::invalid("attention map dims do not match values"));
        }
        for row in values.chunks(tokens) {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid("attention rows must be probability vectors"));
            }
        }
        Ok(Self {
            height,
            width,
            tokens,
            values,
            tau,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    pub channels: usize,
    pub vocab: usize,
    pub embed_dim: usize,
    pub proj_dim: usize,
}

impl HeadDims {
    pub fn feature_dim(&self) -> usize {
        self.channels + TIME_EMBED_DIM
    }
}

/// Query/key projections and token embeddings for one cross-attention head.
///
/// Regenerated bit-identically from `(seed, dims)`. The head only reads the
/// latent; it never feeds back into the noise prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    dims: HeadDims,
    t_total: usize,
    /// `F × d`, row-major.
    w_q: Vec<f64>,
    /// `E × d`, row-major.
    w_k: Vec<f64>,
    /// `V × E`, row-major.
    embeddings: Vec<f64>,
}

pub const DEFAULT_EMBED_DIM: usize = 8;
pub const DEFAULT_PROJ_DIM: usize = 8;
pub const DEFAULT_HEAD_SEED: u64 = 42;
/// Scales query weights so attention logits are O(1) for unit-range latents.
const QUERY_GAIN: f64 = 2.0;

impl AttentionHead {
    pub fn seeded(seed: u64, dims: HeadDims, t_total: usize) -> Result<Self> {
        if dims.channels == 0 || dims.vocab == 0 || dims.embed_dim == 0 || dims.proj_dim == 0 {
            return Err(Error::invalid("attention head dims must be positive"));
        }
        let f = dims.feature_dim();
        let (e, d) = (dims.embed_dim, dims.proj_dim);
        let mut rng = SeededRng::new(seed, 0);
        let embeddings = (0..dims.vocab * e).map(|_| rng.normal()).collect();
        let qs = QUERY_GAIN / (f as f64).sqrt();
        let w_q = (0..f * d).map(|_| qs * rng.normal()).collect();
        let ks = 1.0 / (e as f64).sqrt();
        let w_k = (0..e * d).map(|_| ks * rng.normal()).collect();
        Ok(Self {
            dims,
            t_total,
            w_q,
            w_k,
            embeddings,
        })
    }

    /// The default head for a world: 8-dim embeddings and projections.
    pub fn for_world(world: &ToyWorld, t_total: usize, seed: u64) -> Result<Self> {
        Self::seeded(
            seed,
            HeadDims {
                channels: world.shape().2,
                vocab: world.vocab_size(),
                embed_dim: DEFAULT_EMBED_DIM,
                proj_dim: DEFAULT_PROJ_DIM,
            },
            t_total,
        )
    }

    pub fn dims(&self) -> HeadDims {
        self.dims
    }

    pub fn t_total(&self) -> usize {
        self.t_total
    }

    pub fn w_q(&self) -> &[f64] {
        &self.w_q
    }

    pub fn w_k(&self) -> &[f64] {
        &self.w_k
    }

    pub fn embeddings(&self) -> &[f64] {
        &self.embeddings
    }

    /// Zeroes the query projection (every pixel then attends uniformly).
    pub fn with_zero_queries(mut self) -> Self {
        self.w_q.iter_mut().for_each(|v| *v = 0.0);
        self
    }

    /// Key matrix `embed(c) · W_K`, `L × d` row-major.
    pub fn keys(&self, c: &PromptSpec) -> Result<Vec<f64>> {
        let (e, d) = (self.dims.embed_dim, self.dims.proj_dim);
        let mut out = vec![0.0; c.len() * d];
        for (j, &tok) in c.tokens.iter().enumerate() {
            if tok >= self.dims.vocab {
                return Err(Error::invalid(format!(
                    "token id {tok} outside head vocabulary {}",
                    self.dims.vocab
                )));
            }
            let emb = &self.embeddings[tok * e..(tok + 1) * e];
            for (a, &ev) in emb.iter().enumerate() {
                let row = &self.w_k[a * d..(a + 1) * d];
                for (o, &w) in out[j * d..(j + 1) * d].iter_mut().zip(row) {
                    *o += ev * w;
                }
            }
        }
        Ok(out)
    }

    fn check_latent(&self, x: &LatentGrid) -> Result<()> {
        if x.channels() != self.dims.channels {
            return Err(Error::invalid(format!(
                "latent has {} channels, attention head expects {}",
                x.channels(),
                self.dims.channels
            )));
        }
        Ok(())
    }

    /// Query for one pixel: `[x_p ‖ temb(t)] · W_Q`.
    fn query(&self, px: &[f64], temb: &[f64; TIME_EMBED_DIM], out: &mut [f64]) {
        let d = self.dims.proj_dim;
        out.iter_mut().for_each(|v| *v = 0.0);
        for (a, &f) in px.iter().chain(temb.iter()).enumerate() {
            let row = &self.w_q[a * d..(a + 1) * d];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += f * w;
            }
        }
    }
}

/// Per-call constants of the attention read-out.
struct RowKernel<'a> {
    head: &'a AttentionHead,
    keys: Vec<f64>,
    temb: [f64; TIME_EMBED_DIM],
    tokens: usize,
    tau: f64,
}

impl<'a> RowKernel<'a> {
    fn new(x_t: &LatentGrid, t: usize, c: &PromptSpec, head: &'a AttentionHead, tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::invalid(format!("tau must be positive, got {tau}")));
        }
        head.check_latent(x_t)?;
        Ok(Self {
            head,
            keys: head.keys(c)?,
            temb: time_embedding(t, head.t_total),
            tokens: c.len(),
            tau,
        })
    }

    fn row(&self, px: &[f64], q: &mut [f64], logits: &mut [f64], out: &mut [f64]) {
        let d = self.head.dims.proj_dim;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        self.head.query(px, &self.temb, q);
        for (j, z) in logits.iter_mut().enumerate() {
            *z = dot(q, &self.keys[j * d..(j + 1) * d]) * inv_sqrt_d;
        }
        softmax_tau_into(logits, self.tau, out);
    }
}

/// `Ā = softmax_τ(Q Kᵀ / √d)` per pixel.
pub fn attention_maps(
    x_t: &LatentGrid,
    t: usize,
    c: &PromptSpec,
    head: &AttentionHead,
    tau: f64,
) -> Result<AttentionMap> {
    let k = RowKernel::new(x_t, t, c, head, tau)?;
    let l = k.tokens;
    let mut values = vec![0.0; x_t.pixels() * l];
    let mut q = vec![0.0; head.dims.proj_dim];
    let mut logits = vec![0.0; l];
    for p in 0..x_t.pixels() {
        k.row(x_t.pixel(p), &mut q, &mut logits, &mut values[p * l..(p + 1) * l]);
    }
    Ok(AttentionMap {
        height: x_t.height(),
        width: x_t.width(),
        tokens: l,
        values,
        tau,
    })
}

/// Attention rows of the listed pixels only, concatenated in list order.
/// Each row matches the corresponding row of [`attention_maps`] bitwise.
pub fn attention_rows(
    x_t: &LatentGrid,
    t: usize,
    c: &PromptSpec,
    head: &AttentionHead,
    tau: f64,
    pixels: &[usize],
) -> Result<Vec<f64>> {
    let k = RowKernel::new(x_t, t, c, head, tau)?;
    let l = k.tokens;
    let mut values = vec![0.0; pixels.len() * l];
    let mut q = vec![0.0; head.dims.proj_dim];
    let mut logits = vec![0.0; l];
    for (i, &p) in pixels.iter().enumerate() {
        if p >= x_t.pixels() {
            return Err(Error::invalid(format!("pixel {p} outside a {}-pixel grid", x_t.pixels())));
        }
        k.row(x_t.pixel(p), &mut q, &mut logits, &mut values[i * l..(i + 1) * l]);
    }
    Ok(values)
}

/// Pulls an upstream gradient on the attention values back to the latent.
///
/// `upstream` has the same layout as [`AttentionMap::values`]; rows that are
/// entirely zero are skipped.
pub fn attention_vjp(
    x_t: &LatentGrid,
    t: usize,
    c: &PromptSpec,
    head: &AttentionHead,
    tau: f64,
    upstream: &[f64],
) -> Result<LatentGrid> {
    let kernel = RowKernel::new(x_t, t, c, head, tau)?;
    let keys = &kernel.keys;
    let (l, d, ch) = (c.len(), head.dims.proj_dim, x_t.channels());
    if upstream.len() != x_t.pixels() * l {
        return Err(Error::invalid("attention_vjp: upstream gradient has the wrong length"));
    }
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut grad = LatentGrid::zeros(x_t.height(), x_t.width(), ch);
    let mut gz = vec![0.0; l];
    let mut gq = vec![0.0; d];
    let (mut q, mut logits, mut a) = (vec![0.0; d], vec![0.0; l], vec![0.0; l]);
    for p in 0..x_t.pixels() {
        let up = &upstream[p * l..(p + 1) * l];
        if up.iter().all(|&v| v == 0.0) {
            continue;
        }
        kernel.row(x_t.pixel(p), &mut q, &mut logits, &mut a);
        // softmax Jacobian with temperature: ∂A_j/∂z_m = A_j (δ_jm − A_m) / τ
        let mean: f64 = up.iter().zip(&a).map(|(u, a)| u * a).sum();
        for j in 0..l {
            gz[j] = a[j] * (up[j] - mean) / tau * inv_sqrt_d;
        }
        gq.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..l {
            for (g, &k) in gq.iter_mut().zip(&keys[j * d..(j + 1) * d]) {
                *g += gz[j] * k;
            }
        }
        // only the latent channels of the feature vector depend on x_t
        let gp = grad.pixel_mut(p);
        for (a_idx, g) in gp.iter_mut().enumerate() {
            *g = dot(&head.w_q[a_idx * d..(a_idx + 1) * d], &gq);
        }
    }
    grad.ensure_finite("attention gradient")?;
    Ok(grad)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
