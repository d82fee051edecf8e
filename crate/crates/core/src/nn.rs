//! A small dense network with hand-written reverse-mode differentiation.
//!
//! Parameters live in one flat `Vec<f64>`, which keeps the optimizer, the
//! checksum-based freeze contract, and finite-difference verification
//! trivial. The backward pass returns gradients with respect to both the
//! parameters and the input, so losses can propagate through the network
//! into conditioning embeddings.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// SiLU (swish) activation `x · sigmoid(x)`.
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Derivative of [`silu`]: `sigmoid(x) · (1 + x · (1 − sigmoid(x)))`.
pub fn silu_prime(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Dot product with four independent accumulators, so the multiply-add
/// chain is not serialized on a single register.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (xs, ys) in (&mut ca).zip(&mut cb) {
        acc[0] += xs[0] * ys[0];
        acc[1] += xs[1] * ys[1];
        acc[2] += xs[2] * ys[2];
        acc[3] += xs[3] * ys[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Multilayer perceptron topology: `dims[0]` inputs through hidden layers to
/// `dims.last()` outputs. SiLU on every layer except the final (linear) one.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    /// Per layer: offset of the weight block, then of the bias block.
    offsets: Vec<(usize, usize)>,
    total: usize,
}

impl Mlp {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "MLP needs at least input and output dims, all nonzero, got {dims:?}"
            )));
        }
        let mut offsets = Vec::with_capacity(dims.len() - 1);
        let mut total = 0;
        for l in 0..dims.len() - 1 {
            let w_off = total;
            total += dims[l] * dims[l + 1];
            let b_off = total;
            total += dims[l + 1];
            offsets.push((w_off, b_off));
        }
        Ok(Mlp { dims, offsets, total })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.total
    }

    /// He-style initialization for the SiLU layers; the final linear layer
    /// starts at zero so an untrained network predicts zero output, which
    /// stabilizes early optimization and gives tests a closed-form start.
    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.total];
        for l in 0..self.layer_count() - 1 {
            let (w_off, _) = self.offsets[l];
            let fan_in = self.dims[l] as f64;
            let scale = (2.0 / fan_in).sqrt();
            for i in 0..self.dims[l] * self.dims[l + 1] {
                p[w_off + i] = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        p
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.total {
            return Err(Error::contract(format!(
                "parameter vector has length {}, MLP needs {}",
                params.len(),
                self.total
            )));
        }
        Ok(())
    }

    /// Weight block of layer `l`, row-major `dims[l+1] × dims[l]`.
    fn weights<'a>(&self, params: &'a [f64], l: usize) -> &'a [f64] {
        let (w_off, b_off) = self.offsets[l];
        &params[w_off..b_off]
    }

    fn biases<'a>(&self, params: &'a [f64], l: usize) -> &'a [f64] {
        let (_, b_off) = self.offsets[l];
        &params[b_off..b_off + self.dims[l + 1]]
    }

    /// Plain forward pass.
    pub fn forward(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(params, input)?.0)
    }

    /// Forward pass keeping the per-layer pre-activations and activations
    /// needed by [`Mlp::backward`].
    pub fn forward_cached(&self, params: &[f64], input: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        self.check_params(params)?;
        if input.len() != self.dims[0] {
            return Err(Error::contract(format!(
                "input has length {}, MLP expects {}",
                input.len(),
                self.dims[0]
            )));
        }
        let layers = self.layer_count();
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(layers + 1);
        let mut zs: Vec<Vec<f64>> = Vec::with_capacity(layers);
        activations.push(input.to_vec());
        for l in 0..layers {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let w = self.weights(params, l);
            let b = self.biases(params, l);
            let a_prev = &activations[l];
            let mut z = vec![0.0; n_out];
            for (i, zi) in z.iter_mut().enumerate() {
                let row = &w[i * n_in..(i + 1) * n_in];
                *zi = b[i] + dot(row, a_prev);
            }
            let a = if l + 1 == layers {
                z.clone()
            } else {
                z.iter().map(|&v| silu(v)).collect()
            };
            zs.push(z);
            activations.push(a);
        }
        let out = activations.last().unwrap().clone();
        Ok((out, MlpCache { activations, zs }))
    }

    /// Reverse-mode pass: given ∂loss/∂output, returns (∂loss/∂params,
    /// ∂loss/∂input).
    pub fn backward(
        &self,
        params: &[f64],
        cache: &MlpCache,
        dloss_doutput: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grads = vec![0.0; self.total];
        let dinput = self.backward_acc(params, cache, dloss_doutput, &mut grads)?;
        Ok((grads, dinput))
    }

    /// Like [`Mlp::backward`], but adds the parameter gradients into `grads`
    /// in place, so batch loops can accumulate without reallocating.
    pub fn backward_acc(
        &self,
        params: &[f64],
        cache: &MlpCache,
        dloss_doutput: &[f64],
        grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        self.check_params(params)?;
        if dloss_doutput.len() != self.output_dim() {
            return Err(Error::contract(format!(
                "output gradient has length {}, MLP produces {}",
                dloss_doutput.len(),
                self.output_dim()
            )));
        }
        if grads.len() != self.total {
            return Err(Error::contract(format!(
                "gradient accumulator has length {}, MLP needs {}",
                grads.len(),
                self.total
            )));
        }
        let layers = self.layer_count();
        let mut delta = dloss_doutput.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            if l + 1 != layers {
                for (d, z) in delta.iter_mut().zip(&cache.zs[l]) {
                    *d *= silu_prime(*z);
                }
            }
            let (w_off, b_off) = self.offsets[l];
            let a_prev = &cache.activations[l];
            for i in 0..n_out {
                let di = delta[i];
                grads[b_off + i] += di;
                let g_row = &mut grads[w_off + i * n_in..w_off + (i + 1) * n_in];
                for (g, av) in g_row.iter_mut().zip(a_prev) {
                    *g += di * av;
                }
            }
            let w = self.weights(params, l);
            let mut prev_delta = vec![0.0; n_in];
            for (i, &di) in delta.iter().enumerate() {
                let row = &w[i * n_in..(i + 1) * n_in];
                for (pd, wv) in prev_delta.iter_mut().zip(row) {
                    *pd += di * wv;
                }
            }
            delta = prev_delta;
        }
        Ok(delta)
    }
}

/// Intermediate state of a forward pass: `activations[0]` is the input,
/// `activations[l+1]` the output of layer `l`; `zs[l]` its pre-activation.
#[derive(Debug, Clone)]
pub struct MlpCache {
    activations: Vec<Vec<f64>>,
    zs: Vec<Vec<f64>>,
}

/// Sinusoidal timestep embedding: interleaved sin/cos over geometrically
/// spaced frequencies, the standard transformer construction. `dim` must be
/// even.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::contract(format!(
            "timestep embedding dimension must be even and nonzero, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let exponent = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let freq = 10_000f64.powf(-exponent);
        let angle = t as f64 * freq;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}
