//! Scalar quantization with residual encoding.
//!
//! An altitude `a` inside an increasing edge sequence `b_0 < ... < b_K` is
//! represented as `(bin index + intra-bin offset) / K`, which keeps both the
//! coarse region identity and the fine variation within it. The top edge is
//! closed: `a = b_K` maps to bin `K-1` with residual 1, so the normalized
//! value spans exactly `[0, 1]`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Ordered bin edges. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct BinScheme {
    edges: Vec<f64>,
}

/// Output of [`BinScheme::normalize`]: bin index, intra-bin residual, and the
/// combined scalar `(bin_index + residual) / K` in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedAltitude {
    pub bin_index: usize,
    pub residual: f64,
    pub value: f64,
}

impl BinScheme {
    /// Build a scheme from explicit edges. Requires at least two strictly
    /// increasing, finite edges.
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::domain(format!(
                "bin scheme needs at least 2 edges, got {}",
                edges.len()
            )));
        }
        if edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::domain("bin edges must be finite"));
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::domain(format!(
                "bin edges must be strictly increasing, got {edges:?}"
            )));
        }
        Ok(BinScheme { edges })
    }

    /// The 2°-step scheme covering nautical twilight (−12°) through the
    /// photographic golden hour (+6°), flanked by the data extremes.
    pub fn recommended(a_min: f64, a_max: f64) -> Result<Self> {
        if !(a_min < -12.0) {
            return Err(Error::domain(format!(
                "a_min must lie strictly below -12, got {a_min}"
            )));
        }
        if !(a_max > 6.0) {
            return Err(Error::domain(format!(
                "a_max must lie strictly above 6, got {a_max}"
            )));
        }
        let mut edges = vec![a_min];
        let mut e = -12.0;
        while e <= 6.0 {
            edges.push(e);
            e += 2.0;
        }
        edges.push(a_max);
        BinScheme::new(edges)
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Number of bins K.
    pub fn bin_count(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn lower(&self) -> f64 {
        self.edges[0]
    }

    pub fn upper(&self) -> f64 {
        *self.edges.last().unwrap()
    }

    pub fn contains(&self, a: f64) -> bool {
        a >= self.lower() && a <= self.upper()
    }

    /// Clamp an altitude into the scheme domain. Opt-in at call sites that
    /// explicitly allow extrapolated inputs; everything else hard-errors.
    pub fn clamp(&self, a: f64) -> f64 {
        a.clamp(self.lower(), self.upper())
    }

    fn check_domain(&self, a: f64) -> Result<()> {
        if !a.is_finite() {
            return Err(Error::domain(format!("altitude must be finite, got {a}")));
        }
        if a < self.lower() {
            return Err(Error::domain(format!(
                "altitude {a} below lower edge {}",
                self.lower()
            )));
        }
        if a > self.upper() {
            return Err(Error::domain(format!(
                "altitude {a} above upper edge {}",
                self.upper()
            )));
        }
        Ok(())
    }

    /// Largest `i` with `b_i <= a`, capped at `K-1` so `a = b_K` maps to the
    /// top bin.
    pub fn quantize(&self, a: f64) -> Result<usize> {
        self.check_domain(a)?;
        let k = self.bin_count();
        let i = match self.edges.partition_point(|&e| e <= a) {
            0 => 0, // unreachable after the domain check, kept for safety
            p => p - 1,
        };
        Ok(i.min(k - 1))
    }

    /// Normalized offset of `a` within its bin; equals 1 only at `a = b_K`.
    pub fn residual(&self, a: f64) -> Result<f64> {
        let i = self.quantize(a)?;
        Ok((a - self.edges[i]) / (self.edges[i + 1] - self.edges[i]))
    }

    /// The bin-residual normalization `(Q(a) + R(a)) / K`.
    pub fn normalize(&self, a: f64) -> Result<NormalizedAltitude> {
        let bin_index = self.quantize(a)?;
        let residual = (a - self.edges[bin_index]) / (self.edges[bin_index + 1] - self.edges[bin_index]);
        let value = (bin_index as f64 + residual) / self.bin_count() as f64;
        Ok(NormalizedAltitude { bin_index, residual, value })
    }

    /// Piecewise-linear inverse of [`BinScheme::normalize`].
    pub fn denormalize(&self, v: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::domain(format!(
                "normalized value must lie in [0, 1], got {v}"
            )));
        }
        let k = self.bin_count();
        let scaled = v * k as f64;
        let i = (scaled.floor() as usize).min(k - 1);
        let frac = scaled - i as f64;
        Ok(self.edges[i] + frac * (self.edges[i + 1] - self.edges[i]))
    }

    /// Serialize as a bare JSON array of edge values.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.edges).unwrap()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let edges: Vec<f64> = serde_json::from_str(s)
            .map_err(|e| Error::domain(format!("bin scheme JSON: {e}")))?;
        BinScheme::new(edges)
    }

    /// Parse a CLI-style edge list such as `"a_min,-6,-4,-2,a_max"`. The
    /// literals `a_min`/`a_max` resolve to the supplied data extremes.
    pub fn parse_spec(spec: &str, a_min: Option<f64>, a_max: Option<f64>) -> Result<Self> {
        let mut edges = Vec::new();
        for tok in spec.split(',') {
            let tok = tok.trim();
            let v = match tok {
                "a_min" => a_min.ok_or_else(|| {
                    Error::domain("bin spec uses a_min but no dataset minimum is available")
                })?,
                "a_max" => a_max.ok_or_else(|| {
                    Error::domain("bin spec uses a_max but no dataset maximum is available")
                })?,
                _ => tok
                    .parse::<f64>()
                    .map_err(|_| Error::domain(format!("bad bin edge {tok:?}")))?,
            };
            edges.push(v);
        }
        BinScheme::new(edges)
    }
}

/// Draw `target_per_bin` member indices per bin, uniformly with replacement,
/// so the output histogram over bins is exactly uniform. Deterministic given
/// the seed. Errors if any bin has no members (the binning is too fine for
/// the data).
pub fn resample_balanced(
    altitudes: &[f64],
    scheme: &BinScheme,
    target_per_bin: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let k = scheme.bin_count();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (idx, &a) in altitudes.iter().enumerate() {
        members[scheme.quantize(a)?].push(idx);
    }
    for (i, m) in members.iter().enumerate() {
        if m.is_empty() {
            return Err(Error::domain(format!(
                "bin [{}, {}] has no samples; the scheme is too fine for the data",
                scheme.edges[i],
                scheme.edges[i + 1]
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(k * target_per_bin);
    for m in &members {
        for _ in 0..target_per_bin {
            out.push(m[rng.random_range(0..m.len())]);
        }
    }
    Ok(out)
}

/// Default resampling target: the occupancy of the fullest bin.
pub fn suggested_target(altitudes: &[f64], scheme: &BinScheme) -> Result<usize> {
    let mut counts = vec![0usize; scheme.bin_count()];
    for &a in altitudes {
        counts[scheme.quantize(a)?] += 1;
    }
    Ok(counts.into_iter().max().unwrap_or(0))
}
