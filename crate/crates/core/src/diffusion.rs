//! Desk-scale pixel-space diffusion: DDPM noise schedule, forward
//! corruption, a dense ε-prediction network, ε-loss, classifier-free
//! guidance, deterministic DDIM, and two-phase partial sampling that swaps
//! the conditioning context mid-trajectory.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::container::{checksum_f64, Container, Dtype};
use crate::encoder::TokenSet;
use crate::img::Image;
use crate::nn::{timestep_embedding, Mlp, MlpCache};
use crate::{Error, Result};

/// Standard DDPM step count.
pub const DEFAULT_T: usize = 1000;
/// Standard DDPM linear-β endpoints.
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
/// Sinusoidal timestep-embedding width fed to the denoiser.
pub const TIME_EMBED_DIM: usize = 64;
/// Hidden widths of the dense denoiser.
pub const DENOISER_HIDDEN: [usize; 3] = [256, 256, 256];
/// Sampling defaults: DDIM steps, context→structure switch point, guidance.
pub const DEFAULT_STEPS: usize = 30;
pub const DEFAULT_SWITCH_STEP: usize = 15;
pub const DEFAULT_GUIDANCE: f64 = 7.5;

/// Linear-β DDPM schedule with cached cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::contract(format!("timestep {t} out of range 0..{}", self.len())))
    }
}

/// Linear interpolation of β from `beta_start` to `beta_end` over `t_max`
/// steps (a single-step schedule is just `[beta_start]`), with
/// ᾱ_t = Π_{s≤t}(1−β_s).
pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(Error::domain("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::domain(format!(
            "betas must satisfy 0 < start ≤ end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> = if t_max == 1 {
        vec![beta_start]
    } else {
        (0..t_max)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64)
            .collect()
    };
    let mut alpha_bars = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for b in &betas {
        prod *= 1.0 - b;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule { betas, alpha_bars })
}

/// Closed-form forward corruption x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε.
pub fn forward_noise(x0: &Image, t: usize, eps: &Image, s: &NoiseSchedule) -> Result<Image> {
    x0.check_same_shape(eps, "forward noise")?;
    let ab = s.alpha_bar(t)?;
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .pixels()
        .iter()
        .zip(eps.pixels())
        .map(|(x, e)| signal * x + noise * e)
        .collect();
    Image::from_vec(x0.width(), x0.height(), data)
}

/// Dense ε-prediction network over flattened pixels. The input concatenates
/// the noisy image, a sinusoidal timestep embedding, and a pooled
/// conditioning vector; the output is the predicted noise image.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub mlp: Mlp,
    pub height: usize,
    pub width: usize,
    pub cond_dim: usize,
}

impl Denoiser {
    pub fn new(height: usize, width: usize, cond_dim: usize) -> Result<Self> {
        Self::with_hidden(height, width, cond_dim, &DENOISER_HIDDEN)
    }

    pub fn with_hidden(
        height: usize,
        width: usize,
        cond_dim: usize,
        hidden: &[usize],
    ) -> Result<Self> {
        if height == 0 || width == 0 || cond_dim == 0 {
            return Err(Error::contract("denoiser needs nonzero image and conditioning sizes"));
        }
        let pixels = height * width;
        let mut dims = vec![pixels + TIME_EMBED_DIM + cond_dim];
        dims.extend_from_slice(hidden);
        dims.push(pixels);
        Ok(Denoiser { mlp: Mlp::new(dims)?, height, width, cond_dim })
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.mlp.init_params(rng)
    }

    fn assemble_input(&self, x_t: &Image, t: usize, cond: &[f64]) -> Result<Vec<f64>> {
        if x_t.height() != self.height || x_t.width() != self.width {
            return Err(Error::contract(format!(
                "denoiser expects {}x{} images, got {}x{}",
                self.width,
                self.height,
                x_t.width(),
                x_t.height()
            )));
        }
        if cond.len() != self.cond_dim {
            return Err(Error::contract(format!(
                "conditioning vector has length {}, denoiser expects {}",
                cond.len(),
                self.cond_dim
            )));
        }
        let mut input = Vec::with_capacity(self.mlp.input_dim());
        input.extend_from_slice(x_t.pixels());
        input.extend_from_slice(&timestep_embedding(t, TIME_EMBED_DIM)?);
        input.extend_from_slice(cond);
        Ok(input)
    }

    /// Predicted noise ε̂(x_t, t, cond).
    pub fn predict(&self, params: &[f64], x_t: &Image, t: usize, cond: &[f64]) -> Result<Image> {
        let input = self.assemble_input(x_t, t, cond)?;
        let out = self.mlp.forward(params, &input)?;
        Image::from_vec(self.width, self.height, out)
    }

    /// Forward pass retaining activations for [`Denoiser::backward`].
    pub fn predict_cached(
        &self,
        params: &[f64],
        x_t: &Image,
        t: usize,
        cond: &[f64],
    ) -> Result<(Image, MlpCache)> {
        let input = self.assemble_input(x_t, t, cond)?;
        let (out, cache) = self.mlp.forward_cached(params, &input)?;
        Ok((Image::from_vec(self.width, self.height, out)?, cache))
    }

    /// Reverse-mode pass. Returns (parameter gradients, conditioning
    /// gradients) — the conditioning slice of the input gradient is what
    /// textual inversion and the context network train against.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &MlpCache,
        dloss_deps: &Image,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grads = vec![0.0; self.param_count()];
        let dcond = self.backward_acc(params, cache, dloss_deps, &mut grads)?;
        Ok((grads, dcond))
    }

    /// Like [`Denoiser::backward`], accumulating parameter gradients into
    /// `grads` in place and returning only the conditioning gradients.
    pub fn backward_acc(
        &self,
        params: &[f64],
        cache: &MlpCache,
        dloss_deps: &Image,
        grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        let dinput = self.mlp.backward_acc(params, cache, dloss_deps.pixels(), grads)?;
        let cond_off = self.height * self.width + TIME_EMBED_DIM;
        Ok(dinput[cond_off..].to_vec())
    }

    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "height": self.height,
            "width": self.width,
            "cond_dim": self.cond_dim,
            "hidden": self.mlp.dims()[1..self.mlp.dims().len() - 1],
        })
    }

    pub fn from_meta(meta: &serde_json::Value) -> Result<Self> {
        let get = |key: &str| -> Result<usize> {
            meta[key]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::contract(format!("denoiser meta lacks {key:?}")))
        };
        let hidden: Vec<usize> = meta["hidden"]
            .as_array()
            .ok_or_else(|| Error::contract("denoiser meta lacks hidden dims"))?
            .iter()
            .map(|v| v.as_u64().map(|u| u as usize))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::contract("denoiser hidden dims must be integers"))?;
        Denoiser::with_hidden(get("height")?, get("width")?, get("cond_dim")?, &hidden)
    }
}

/// The toy "text encoder": a fixed vocabulary of named embedding rows plus
/// a reserved null embedding for unconditional prediction. Trained once by
/// the base stage, frozen afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTable {
    pub d: usize,
    names: Vec<String>,
    embeddings: Vec<f64>,
    null: Vec<f64>,
}

impl PromptTable {
    pub fn new(names: Vec<String>, d: usize, seed: u64) -> Result<Self> {
        if d == 0 {
            return Err(Error::contract("prompt table needs d >= 1"));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::contract(format!("duplicate vocabulary word {n:?}")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embeddings = (0..names.len() * d).map(|_| rng.sample(StandardNormal)).collect();
        let null = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        Ok(PromptTable { d, names, embeddings, null })
    }

    /// Vocabulary for a K-bin scheme: one word per bin.
    pub fn for_bins(bin_count: usize, d: usize, seed: u64) -> Result<Self> {
        let names = (0..bin_count).map(|i| format!("bin{i}")).collect();
        PromptTable::new(names, d, seed)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn embedding(&self, name: &str) -> Result<&[f64]> {
        let idx = self
            .index_of(name)
            .ok_or_else(|| Error::domain(format!("unknown vocabulary word {name:?}")))?;
        Ok(&self.embeddings[idx * self.d..(idx + 1) * self.d])
    }

    pub fn null(&self) -> &[f64] {
        &self.null
    }

    /// All trainable values as one flat block: word rows then the null row.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.embeddings.clone();
        out.extend_from_slice(&self.null);
        out
    }

    pub fn flat_len(&self) -> usize {
        (self.names.len() + 1) * self.d
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::contract(format!(
                "prompt table block has length {}, expected {}",
                flat.len(),
                self.flat_len()
            )));
        }
        let split = self.names.len() * self.d;
        self.embeddings.copy_from_slice(&flat[..split]);
        self.null.copy_from_slice(&flat[split..]);
        Ok(())
    }

    /// Context for a sequence of vocabulary words.
    pub fn context(&self, words: &[&str]) -> Result<PromptContext> {
        let mut rows = Vec::with_capacity(words.len() * self.d);
        for w in words {
            rows.extend_from_slice(self.embedding(w)?);
        }
        PromptContext::new(self.d, rows, self.null.clone())
    }

    /// The unconditional context (no embeddings, null vector only).
    pub fn null_context(&self) -> PromptContext {
        PromptContext { d: self.d, n: 0, rows: Vec::new(), null: self.null.clone() }
    }

    /// Context whose rows come from a learned token set.
    pub fn context_from_tokens(&self, tokens: &TokenSet) -> Result<PromptContext> {
        if tokens.d != self.d {
            return Err(Error::contract(format!(
                "token set dimension {} does not match table dimension {}",
                tokens.d, self.d
            )));
        }
        PromptContext::new(self.d, tokens.embeddings.clone(), self.null.clone())
    }
}

/// An ordered sequence of embedding rows pooled (mean) into the single
/// conditioning vector, plus the reserved null vector for the unconditional
/// branch. An empty sequence IS the null context.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptContext {
    pub d: usize,
    n: usize,
    rows: Vec<f64>,
    null: Vec<f64>,
}

impl PromptContext {
    pub fn new(d: usize, rows: Vec<f64>, null: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::contract("prompt context needs d >= 1"));
        }
        if rows.len() % d != 0 || null.len() != d {
            return Err(Error::contract(format!(
                "prompt context rows ({}) must be a multiple of d = {d} and null length {} must equal d",
                rows.len(),
                null.len()
            )));
        }
        if rows.iter().chain(&null).any(|v| !v.is_finite()) {
            return Err(Error::contract("prompt context embeddings must be finite"));
        }
        Ok(PromptContext { d, n: rows.len() / d, rows, null })
    }

    pub fn token_count(&self) -> usize {
        self.n
    }

    pub fn is_null(&self) -> bool {
        self.n == 0
    }

    /// Mean of the embedding rows; the null vector when no rows exist.
    pub fn conditional(&self) -> Vec<f64> {
        if self.n == 0 {
            return self.null.clone();
        }
        let mut out = vec![0.0; self.d];
        for r in 0..self.n {
            for (o, v) in out.iter_mut().zip(&self.rows[r * self.d..(r + 1) * self.d]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= self.n as f64;
        }
        out
    }

    pub fn unconditional(&self) -> &[f64] {
        &self.null
    }
}

/// ε-prediction loss: for each image draw t ~ U{0,…,T−1} and ε ~ N(0,I),
/// corrupt, predict, and average the per-image squared error ‖ε − ε̂‖²
/// (summed over pixels) across the batch. Draw order per sample — t, then
/// the ε pixels — is part of the reproducibility contract.
pub fn eps_loss_with<F>(
    batch: &[Image],
    conds: &[Vec<f64>],
    s: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    mut predict: F,
) -> Result<f64>
where
    F: FnMut(&Image, usize, &[f64]) -> Result<Image>,
{
    if batch.is_empty() {
        return Err(Error::contract("eps loss needs a nonempty batch"));
    }
    if batch.len() != conds.len() {
        return Err(Error::contract(format!(
            "batch has {} images but {} conditioning vectors",
            batch.len(),
            conds.len()
        )));
    }
    let mut total = 0.0;
    for (x0, cond) in batch.iter().zip(conds) {
        let t = rng.random_range(0..s.len());
        let eps_data: Vec<f64> =
            (0..x0.pixels().len()).map(|_| rng.sample(StandardNormal)).collect();
        let eps = Image::from_vec(x0.width(), x0.height(), eps_data)?;
        let x_t = forward_noise(x0, t, &eps, s)?;
        let pred = predict(&x_t, t, cond)?;
        pred.check_same_shape(&eps, "eps prediction")?;
        total += pred
            .pixels()
            .iter()
            .zip(eps.pixels())
            .map(|(p, e)| (p - e).powi(2))
            .sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// [`eps_loss_with`] over a denoiser with one shared context.
pub fn eps_loss(
    den: &Denoiser,
    params: &[f64],
    batch: &[Image],
    ctx: &PromptContext,
    s: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let cond = ctx.conditional();
    let conds = vec![cond; batch.len()];
    eps_loss_with(batch, &conds, s, rng, |x_t, t, c| den.predict(params, x_t, t, c))
}

/// Classifier-free guidance: ε_u + w·(ε_c − ε_u) with ε_u from the null
/// context. The w = 1 and w = 0 endpoints short-circuit to the single
/// branch so the identities hold bit-exactly.
pub fn cfg_predict(
    den: &Denoiser,
    params: &[f64],
    x_t: &Image,
    t: usize,
    ctx: &PromptContext,
    w: f64,
) -> Result<Image> {
    if !(w >= 0.0) {
        return Err(Error::domain(format!("guidance scale must be >= 0, got {w}")));
    }
    if w == 1.0 {
        return den.predict(params, x_t, t, &ctx.conditional());
    }
    let eps_u = den.predict(params, x_t, t, ctx.unconditional())?;
    if w == 0.0 {
        return Ok(eps_u);
    }
    let eps_c = den.predict(params, x_t, t, &ctx.conditional())?;
    let data = eps_u
        .pixels()
        .iter()
        .zip(eps_c.pixels())
        .map(|(u, c)| u + w * (c - u))
        .collect();
    Image::from_vec(x_t.width(), x_t.height(), data)
}

/// One deterministic (η = 0) DDIM update. `t_prev = Some(t)` is the exact
/// identity; `t_prev = None` denotes the clean endpoint (ᾱ = 1), returning
/// the denoised estimate x̂0 itself.
pub fn ddim_step(
    x_t: &Image,
    eps_hat: &Image,
    t: usize,
    t_prev: Option<usize>,
    s: &NoiseSchedule,
) -> Result<Image> {
    x_t.check_same_shape(eps_hat, "ddim step")?;
    let ab_t = s.alpha_bar(t)?;
    let ab_prev = match t_prev {
        Some(p) if p > t => {
            return Err(Error::contract(format!("t_prev {p} must not exceed t {t}")));
        }
        Some(p) if p == t => return Ok(x_t.clone()),
        Some(p) => s.alpha_bar(p)?,
        None => 1.0,
    };
    let (sqrt_ab_t, sqrt_om_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (sqrt_ab_p, sqrt_om_p) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let data = x_t
        .pixels()
        .iter()
        .zip(eps_hat.pixels())
        .map(|(x, e)| {
            let x0_hat = (x - sqrt_om_t * e) / sqrt_ab_t;
            sqrt_ab_p * x0_hat + sqrt_om_p * e
        })
        .collect();
    Image::from_vec(x_t.width(), x_t.height(), data)
}

/// The DDIM timestep subsequence: exactly `steps` uniformly spaced entries
/// over {0,…,T−1}, ascending, always including T−1 (and 0 for steps ≥ 2).
pub fn ddim_trajectory(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::contract("trajectory needs at least one step"));
    }
    if steps > t_max {
        return Err(Error::contract(format!(
            "cannot stride {steps} steps over a {t_max}-step schedule"
        )));
    }
    if steps == 1 {
        return Ok(vec![t_max - 1]);
    }
    let span = (t_max - 1) as f64 / (steps - 1) as f64;
    Ok((0..steps).map(|i| (i as f64 * span).round() as usize).collect())
}

/// Two-phase guided DDIM sampling from seeded Gaussian noise: conditioning
/// follows `ctx_first` for the first `switch_step` updates and `ctx_second`
/// afterwards, both guided against their null vector. Pixels are clamped to
/// [0,1] only once, at the very end.
#[allow(clippy::too_many_arguments)]
pub fn sample_partial(
    den: &Denoiser,
    params: &[f64],
    s: &NoiseSchedule,
    ctx_first: &PromptContext,
    ctx_second: &PromptContext,
    steps: usize,
    switch_step: usize,
    w: f64,
    seed: u64,
) -> Result<Image> {
    if switch_step > steps {
        return Err(Error::contract(format!(
            "switch step {switch_step} exceeds step count {steps}"
        )));
    }
    let timesteps: Vec<usize> = ddim_trajectory(s.len(), steps)?.into_iter().rev().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> =
        (0..den.height * den.width).map(|_| rng.sample(StandardNormal)).collect();
    let mut x = Image::from_vec(den.width, den.height, data)?;
    for (i, &t) in timesteps.iter().enumerate() {
        let ctx = if i < switch_step { ctx_first } else { ctx_second };
        let eps_hat = cfg_predict(den, params, &x, t, ctx, w)?;
        let t_prev = timesteps.get(i + 1).copied();
        x = ddim_step(&x, &eps_hat, t, t_prev, s)?;
    }
    x.clamp01();
    Ok(x)
}

/// Single-context guided sampling: both phases share one context.
pub fn sample(
    den: &Denoiser,
    params: &[f64],
    s: &NoiseSchedule,
    ctx: &PromptContext,
    steps: usize,
    w: f64,
    seed: u64,
) -> Result<Image> {
    sample_partial(den, params, s, ctx, ctx, steps, 0, w, seed)
}

/// The frozen product of base training: denoiser weights, the prompt table,
/// and the schedule they were trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    pub denoiser: Denoiser,
    pub params: Vec<f64>,
    pub table: PromptTable,
    pub schedule: NoiseSchedule,
}

impl BaseModel {
    /// Checksum over every frozen value (denoiser weights and the whole
    /// prompt table); token and context training must leave it unchanged.
    pub fn checksum(&self) -> String {
        let mut all = self.params.clone();
        all.extend(self.table.flat());
        checksum_f64(&all)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new("base_model", Dtype::F64);
        c.meta = serde_json::json!({
            "denoiser": self.denoiser.meta(),
            "vocab": self.table.names(),
            "t_max": self.schedule.len(),
            "beta_start": self.schedule.betas[0],
            "beta_end": *self.schedule.betas.last().unwrap(),
        });
        c.push("params", vec![self.params.len()], self.params.clone())?;
        c.push("table", vec![self.table.flat_len()], self.table.flat())?;
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        if c.kind != "base_model" {
            return Err(Error::contract(format!(
                "{}: container kind {:?} is not a base model",
                path.display(),
                c.kind
            )));
        }
        let denoiser = Denoiser::from_meta(&c.meta["denoiser"])?;
        let names: Vec<String> = c.meta["vocab"]
            .as_array()
            .ok_or_else(|| Error::contract("base model meta lacks vocab"))?
            .iter()
            .map(|v| v.as_str().map(str::to_owned))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::contract("vocab entries must be strings"))?;
        let t_max = c.meta["t_max"]
            .as_u64()
            .ok_or_else(|| Error::contract("base model meta lacks t_max"))? as usize;
        let beta_start = c.meta["beta_start"].as_f64().unwrap_or(DEFAULT_BETA_START);
        let beta_end = c.meta["beta_end"].as_f64().unwrap_or(DEFAULT_BETA_END);
        let schedule = make_schedule(t_max, beta_start, beta_end)?;
        let params = c.array_as("params", &[denoiser.param_count()])?.data.clone();
        let mut table = PromptTable::new(names, denoiser.cond_dim, 0)?;
        table.set_flat(&c.array_as("table", &[table.flat_len()])?.data)?;
        Ok(BaseModel { denoiser, params, table, schedule })
    }
}
