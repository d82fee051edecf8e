//! The dynamic embedding pipeline: normalized altitude → RBF feature
//! enrichment → SALN modulation of static embeddings → context tokens, plus
//! storage for learned token sets.
//!
//! The context network keeps all trainable values (log-gammas, the two
//! affine maps, the static embeddings) in one flat parameter vector; the
//! backward pass is hand-derived, including the layer-norm term.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::binning::BinScheme;
use crate::container::{Container, Dtype};
use crate::{Error, Result};

/// Default number of RBF centers: at least one per 2°-scheme bin plus slack.
pub const DEFAULT_RBF_CENTERS: usize = 16;
/// Toy embedding dimension.
pub const DEFAULT_EMBED_DIM: usize = 32;
/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// A named set of embedding rows (M × d).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub name: String,
    pub m: usize,
    pub d: usize,
    pub embeddings: Vec<f64>,
}

impl TokenSet {
    pub fn new(name: impl Into<String>, m: usize, d: usize, embeddings: Vec<f64>) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::contract("token set needs m >= 1 and d >= 1"));
        }
        if embeddings.len() != m * d {
            return Err(Error::contract(format!(
                "token set data length {} does not match {m}x{d}",
                embeddings.len()
            )));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("token set embeddings must be finite"));
        }
        Ok(TokenSet { name: name.into(), m, d, embeddings })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.d..(i + 1) * self.d]
    }

    /// Mean over the M embedding rows: the pooled conditioning vector.
    pub fn pooled(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        for i in 0..self.m {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= self.m as f64;
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new("token_set", Dtype::F64);
        c.meta = serde_json::json!({ "name": self.name });
        c.push("embeddings", vec![self.m, self.d], self.embeddings.clone())?;
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        if c.kind != "token_set" {
            return Err(Error::contract(format!(
                "{}: container kind {:?} is not a token set",
                path.display(),
                c.kind
            )));
        }
        let name = c.meta["name"].as_str().unwrap_or("tokens").to_owned();
        let a = c.array("embeddings")?;
        if a.shape.len() != 2 {
            return Err(Error::contract("token set array must be 2-D"));
        }
        TokenSet::new(name, a.shape[0], a.shape[1], a.data.clone())
    }
}

/// Topology of the context network: J RBF centers, M static embedding rows
/// of dimension d. Parameters live in a flat vector laid out as
/// `[log_gammas (J) | w_scale (d×J) | b_scale (d) | w_shift (d×J) |
/// b_shift (d) | base (M×d)]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContextNet {
    pub j: usize,
    pub m: usize,
    pub d: usize,
    pub eps: f64,
}

/// Forward-pass cache for [`ContextNet::backward`].
#[derive(Debug, Clone)]
pub struct ContextCache {
    v: f64,
    features: Vec<f64>,
    gamma: Vec<f64>,
    ln_rows: Vec<f64>,
    inv_std: Vec<f64>,
}

impl ContextNet {
    pub fn new(j: usize, m: usize, d: usize) -> Result<Self> {
        if j < 2 {
            return Err(Error::contract(format!("RBF layer needs at least 2 centers, got {j}")));
        }
        if m == 0 || d == 0 {
            return Err(Error::contract("context net needs m >= 1 and d >= 1"));
        }
        Ok(ContextNet { j, m, d, eps: LN_EPS })
    }

    pub fn param_count(&self) -> usize {
        self.j + 2 * (self.d * self.j + self.d) + self.m * self.d
    }

    /// Fixed uniform center positions c_j = j/(J−1).
    pub fn center(&self, idx: usize) -> f64 {
        idx as f64 / (self.j - 1) as f64
    }

    fn off_w_scale(&self) -> usize {
        self.j
    }
    fn off_b_scale(&self) -> usize {
        self.j + self.d * self.j
    }
    fn off_w_shift(&self) -> usize {
        self.off_b_scale() + self.d
    }
    fn off_b_shift(&self) -> usize {
        self.off_w_shift() + self.d * self.j
    }
    fn off_base(&self) -> usize {
        self.off_b_shift() + self.d
    }

    /// Identity-initialized parameters: modulation starts as γ(h) = 1,
    /// β(h) = 0, so the context tokens equal LN(base) regardless of input —
    /// plain learnable embeddings until training bends them. Gammas start at
    /// 1/(2Δ²) so neighbouring kernels overlap at exp(−1/2); the base rows
    /// are seeded unit Gaussians.
    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.param_count()];
        let spacing = 1.0 / (self.j - 1) as f64;
        let gamma0 = 1.0 / (2.0 * spacing * spacing);
        for g in &mut p[..self.j] {
            *g = gamma0.ln();
        }
        let b_scale = self.off_b_scale();
        for v in &mut p[b_scale..b_scale + self.d] {
            *v = 1.0;
        }
        let base = self.off_base();
        for v in &mut p[base..] {
            *v = rng.sample(StandardNormal);
        }
        p
    }

    /// Identity initialization with the base rows copied from an existing
    /// token set (the usual warm start from the best structure embedding).
    pub fn init_params_from(&self, tokens: &TokenSet) -> Result<Vec<f64>> {
        if tokens.m != self.m || tokens.d != self.d {
            return Err(Error::contract(format!(
                "token set is {}x{}, context net expects {}x{}",
                tokens.m, tokens.d, self.m, self.d
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = self.init_params(&mut rng);
        let base = self.off_base();
        p[base..].copy_from_slice(&tokens.embeddings);
        Ok(p)
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::contract(format!(
                "parameter vector has length {}, context net needs {}",
                params.len(),
                self.param_count()
            )));
        }
        Ok(())
    }

    /// RBF features φ_j = exp(−γ_j (v − c_j)²) for v in [0, 1].
    pub fn rbf_encode(&self, params: &[f64], v: f64) -> Result<Vec<f64>> {
        self.check_params(params)?;
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::domain(format!(
                "RBF input must lie in [0, 1], got {v}"
            )));
        }
        Ok((0..self.j)
            .map(|idx| {
                let gamma = params[idx].exp();
                (-gamma * (v - self.center(idx)).powi(2)).exp()
            })
            .collect())
    }

    /// Analytic derivative of each RBF feature with respect to v.
    pub fn rbf_encode_dv(&self, params: &[f64], v: f64) -> Result<Vec<f64>> {
        let phi = self.rbf_encode(params, v)?;
        Ok(phi
            .iter()
            .enumerate()
            .map(|(idx, p)| {
                let gamma = params[idx].exp();
                -2.0 * gamma * (v - self.center(idx)) * p
            })
            .collect())
    }

    /// SALN: per base row e, `out = γ(h) ⊙ LN(e) + β(h)` with
    /// `γ(h) = W_scale·h + b_scale` and `β(h) = W_shift·h + b_shift`.
    /// Returns the flat M×d output.
    pub fn saln_modulate(&self, params: &[f64], features: &[f64]) -> Result<Vec<f64>> {
        Ok(self.saln_cached(params, features)?.0)
    }

    fn affine(&self, params: &[f64], w_off: usize, b_off: usize, h: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        for (k, o) in out.iter_mut().enumerate() {
            let row = &params[w_off + k * self.j..w_off + (k + 1) * self.j];
            let mut acc = params[b_off + k];
            for (w, x) in row.iter().zip(h) {
                acc += w * x;
            }
            *o = acc;
        }
        out
    }

    fn saln_cached(&self, params: &[f64], features: &[f64]) -> Result<(Vec<f64>, ContextCache)> {
        self.check_params(params)?;
        if features.len() != self.j {
            return Err(Error::contract(format!(
                "feature vector has length {}, expected {}",
                features.len(),
                self.j
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("features must be finite"));
        }
        let gamma = self.affine(params, self.off_w_scale(), self.off_b_scale(), features);
        let beta = self.affine(params, self.off_w_shift(), self.off_b_shift(), features);

        let base_off = self.off_base();
        let mut ln_rows = vec![0.0; self.m * self.d];
        let mut inv_std = vec![0.0; self.m];
        let mut out = vec![0.0; self.m * self.d];
        for r in 0..self.m {
            let row = &params[base_off + r * self.d..base_off + (r + 1) * self.d];
            let mean = row.iter().sum::<f64>() / self.d as f64;
            let var = row.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / self.d as f64;
            let s_inv = 1.0 / (var + self.eps).sqrt();
            inv_std[r] = s_inv;
            for k in 0..self.d {
                let ln = (row[k] - mean) * s_inv;
                ln_rows[r * self.d + k] = ln;
                out[r * self.d + k] = gamma[k] * ln + beta[k];
            }
        }
        let cache = ContextCache { v: f64::NAN, features: features.to_vec(), gamma, ln_rows, inv_std };
        Ok((out, cache))
    }

    /// Full forward pass from a normalized altitude value: RBF encode, then
    /// SALN-modulate the static embeddings. Returns the flat M×d embedding
    /// block and the cache for [`ContextNet::backward`].
    pub fn forward_cached(&self, params: &[f64], v: f64) -> Result<(Vec<f64>, ContextCache)> {
        let features = self.rbf_encode(params, v)?;
        let (out, mut cache) = self.saln_cached(params, &features)?;
        cache.v = v;
        Ok((out, cache))
    }

    pub fn forward(&self, params: &[f64], v: f64) -> Result<Vec<f64>> {
        Ok(self.forward_cached(params, v)?.0)
    }

    /// Reverse-mode pass: given ∂loss/∂output (flat M×d), accumulate
    /// ∂loss/∂params. The RBF input v is data, so no gradient is returned
    /// for it.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ContextCache,
        dloss_dout: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_params(params)?;
        if dloss_dout.len() != self.m * self.d {
            return Err(Error::contract(format!(
                "output gradient has length {}, expected {}",
                dloss_dout.len(),
                self.m * self.d
            )));
        }
        let mut grads = vec![0.0; self.param_count()];

        // d_gamma[k] = Σ_r δ[r,k]·LN[r,k]; d_beta[k] = Σ_r δ[r,k].
        let mut d_gamma = vec![0.0; self.d];
        let mut d_beta = vec![0.0; self.d];
        for r in 0..self.m {
            for k in 0..self.d {
                let delta = dloss_dout[r * self.d + k];
                d_gamma[k] += delta * cache.ln_rows[r * self.d + k];
                d_beta[k] += delta;
            }
        }

        // Affine maps and their bias terms.
        let (ws, bs, wf, bf) =
            (self.off_w_scale(), self.off_b_scale(), self.off_w_shift(), self.off_b_shift());
        for k in 0..self.d {
            grads[bs + k] += d_gamma[k];
            grads[bf + k] += d_beta[k];
            for jdx in 0..self.j {
                grads[ws + k * self.j + jdx] += d_gamma[k] * cache.features[jdx];
                grads[wf + k * self.j + jdx] += d_beta[k] * cache.features[jdx];
            }
        }

        // Features: h receives gradient from both affine paths.
        let mut d_features = vec![0.0; self.j];
        for (jdx, df) in d_features.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..self.d {
                acc += d_gamma[k] * params[ws + k * self.j + jdx]
                    + d_beta[k] * params[wf + k * self.j + jdx];
            }
            *df = acc;
        }

        // Log-gammas through φ_j = exp(−γ_j (v−c_j)²), γ_j = exp(p_j):
        // ∂φ/∂p = −γ (v−c)² φ.
        if cache.v.is_finite() {
            for jdx in 0..self.j {
                let gamma_j = params[jdx].exp();
                let dist2 = (cache.v - self.center(jdx)).powi(2);
                grads[jdx] += d_features[jdx] * (-gamma_j * dist2 * cache.features[jdx]);
            }
        }

        // Base embeddings through γ(h) ⊙ LN(e): the layer-norm backward
        // dL/de = s⁻¹·(g − mean(g) − y·mean(g⊙y)) with g = δ ⊙ γ(h).
        let base_off = self.off_base();
        for r in 0..self.m {
            let ln = &cache.ln_rows[r * self.d..(r + 1) * self.d];
            let mut g = vec![0.0; self.d];
            for k in 0..self.d {
                g[k] = dloss_dout[r * self.d + k] * cache.gamma[k];
            }
            let g_mean = g.iter().sum::<f64>() / self.d as f64;
            let gy_mean =
                g.iter().zip(ln).map(|(gv, yv)| gv * yv).sum::<f64>() / self.d as f64;
            for k in 0..self.d {
                grads[base_off + r * self.d + k] +=
                    cache.inv_std[r] * (g[k] - g_mean - ln[k] * gy_mean);
            }
        }
        Ok(grads)
    }

    /// Context tokens for an altitude: normalize, encode, modulate.
    pub fn context_tokens(&self, params: &[f64], a: f64, scheme: &BinScheme) -> Result<TokenSet> {
        let v = scheme.normalize(a)?.value;
        let out = self.forward(params, v)?;
        TokenSet::new("D*", self.m, self.d, out)
    }

    pub fn save(&self, params: &[f64], path: &Path) -> Result<()> {
        self.check_params(params)?;
        let mut c = Container::new("context_net", Dtype::F64);
        c.meta = serde_json::json!({ "j": self.j, "m": self.m, "d": self.d, "eps": self.eps });
        c.push("params", vec![params.len()], params.to_vec())?;
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<f64>)> {
        let c = Container::load(path)?;
        if c.kind != "context_net" {
            return Err(Error::contract(format!(
                "{}: container kind {:?} is not a context net",
                path.display(),
                c.kind
            )));
        }
        let get = |key: &str| -> Result<usize> {
            c.meta[key]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::contract(format!("context net meta lacks {key:?}")))
        };
        let net = ContextNet {
            j: get("j")?,
            m: get("m")?,
            d: get("d")?,
            eps: c.meta["eps"].as_f64().unwrap_or(LN_EPS),
        };
        let params = c.array_as("params", &[net.param_count()])?.data.clone();
        Ok((net, params))
    }
}

use rand::SeedableRng;
