//! Metadata ingestion, rain filtering, and the synthetic illumination
//! corpus.
//!
//! The synthetic scenes realize the premise the toolkit is built around:
//! luminance rises with solar altitude through a logistic twilight
//! transition while sensor noise falls. Scene content is piecewise affine
//! with 1-pixel feathered transitions, so the second-difference mask of the
//! blind noise estimator responds almost exclusively to the injected noise
//! rather than to scene edges.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binning::{self, BinScheme, NormalizedAltitude};
use crate::container::{read_pgm, write_pgm};
use crate::ephemeris::{round4, GeoSample, RecordError};
use crate::img::Image;
use crate::seed;
use crate::{Error, Result};

/// Parameters of the synthetic scene and its illumination/noise models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub l_day: f64,
    pub l_night: f64,
    /// Twilight slope, per degree of altitude.
    pub k: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Mixed into every per-scene seed, so corpora with different geometry
    /// seeds get different building layouts at identical item seeds.
    pub geometry_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 32,
            height: 32,
            l_day: 0.8,
            l_night: 0.05,
            k: 1.0 / 3.0,
            sigma_min: 0.005,
            sigma_max: 0.06,
            geometry_seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 3 || self.height < 3 {
            return Err(Error::domain("scene dimensions must be at least 3x3"));
        }
        if !(0.0 <= self.l_night && self.l_night < self.l_day && self.l_day <= 1.0) {
            return Err(Error::domain(format!(
                "luminance bounds must satisfy 0 <= L_night < L_day <= 1, got {} and {}",
                self.l_night, self.l_day
            )));
        }
        if !(0.0 <= self.sigma_min && self.sigma_min <= self.sigma_max) {
            return Err(Error::domain(format!(
                "noise bounds must satisfy 0 <= sigma_min <= sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.k > 0.0) {
            return Err(Error::domain(format!("twilight slope must be positive, got {}", self.k)));
        }
        Ok(())
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scene luminance as a function of altitude: a logistic ramp from L_night
/// to L_day centered on the horizon. Strictly increasing.
pub fn brightness_model(altitude_deg: f64, cfg: &SceneConfig) -> f64 {
    cfg.l_night + (cfg.l_day - cfg.l_night) * logistic(cfg.k * altitude_deg)
}

/// Sensor-noise level as a function of altitude: darker scenes are noisier.
/// Strictly decreasing, mirror of [`brightness_model`].
pub fn noise_model(altitude_deg: f64, cfg: &SceneConfig) -> f64 {
    cfg.sigma_min + (cfg.sigma_max - cfg.sigma_min) * (1.0 - logistic(cfg.k * altitude_deg))
}

/// Relative albedos of the scene regions, all scaled by the luminance.
const SKY_GRADIENT_DROP: f64 = 0.35;
const GROUND_ALBEDO: f64 = 0.45;
const BAND_ALBEDO: f64 = 0.2;
const BUILDING_ALBEDOS: [f64; 3] = [0.3, 0.55, 0.75];

/// Fraction of the inner albedo at pixel distance `d` from a region border
/// (0 on the border row/column, fully inside from 1). Applied per axis, so
/// corners blend bilinearly; the second-difference mask of the noise
/// estimator only responds to such 2-D corners, never to pure rows or
/// columns, and the feathering keeps that response small.
fn feather(d: usize) -> f64 {
    if d == 0 {
        0.5
    } else {
        1.0
    }
}

/// Render one synthetic scene: a vertical sky gradient, a dark horizon band,
/// a flat ground plane, 1–3 "buildings" above the horizon, all scaled by
/// `brightness_model`, plus i.i.d. Gaussian pixel noise at
/// `noise_model(altitude)`, clamped to [0, 1]. Deterministic per
/// (altitude, config, seed).
pub fn generate_scene(altitude_deg: f64, cfg: &SceneConfig, seed_value: u64) -> Result<(Image, GeoSample)> {
    cfg.validate()?;
    if !altitude_deg.is_finite() {
        return Err(Error::domain(format!("altitude must be finite, got {altitude_deg}")));
    }
    let (w, h) = (cfg.width, cfg.height);
    let lum = brightness_model(altitude_deg, cfg);
    let sigma = noise_model(altitude_deg, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.geometry_seed, seed_value));

    let horizon = ((h as f64) * 0.6).floor() as usize;
    let band_end = (horizon + 3).min(h);

    let mut img = Image::zeros(w, h);
    for y in 0..h {
        let base = if y < horizon {
            // Linear sky gradient, brightest at the top.
            1.0 - SKY_GRADIENT_DROP * (y as f64) / ((h - 1) as f64)
        } else if y < band_end {
            // Feather the band's outer rows against their neighbours.
            if y == horizon {
                let sky_edge = 1.0 - SKY_GRADIENT_DROP * ((y - 1) as f64) / ((h - 1) as f64);
                f64::midpoint(sky_edge, BAND_ALBEDO)
            } else if y + 1 == band_end {
                f64::midpoint(BAND_ALBEDO, GROUND_ALBEDO)
            } else {
                BAND_ALBEDO
            }
        } else {
            GROUND_ALBEDO
        };
        for x in 0..w {
            img.set(x, y, base * lum);
        }
    }

    // Buildings: feathered rectangles standing on the horizon band.
    let count = rng.random_range(1..=3usize);
    for _ in 0..count {
        let bw = rng.random_range(3..=8usize).min(w.saturating_sub(4));
        let bh = rng.random_range(4..=12usize).min(horizon);
        let x0 = rng.random_range(1..w - bw - 1);
        let albedo = BUILDING_ALBEDOS[rng.random_range(0..BUILDING_ALBEDOS.len())];
        let top = horizon - bh;
        for y in top..horizon {
            for x in x0..x0 + bw {
                let dx = (x - x0).min(x0 + bw - 1 - x);
                let dy = (y - top).min(horizon - 1 - y);
                let t = feather(dx) * feather(dy);
                let cur = img.get(x, y);
                img.set(x, y, cur + t * (albedo * lum - cur));
            }
        }
    }

    for v in img.pixels_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = (*v + sigma * z).clamp(0.0, 1.0);
    }

    let sample = GeoSample {
        lat: 0.0,
        lon: 0.0,
        utc: "2000-01-01T12:00:00Z".to_owned(),
        tags: Some(vec!["synthetic".to_owned()]),
        altitude_deg: Some(round4(altitude_deg)),
        image: None,
    };
    Ok((img, sample))
}

/// One corpus entry: the rendered image, its exact altitude, and the
/// bin-residual normalization under the corpus scheme.
#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub image: Image,
    pub altitude_deg: f64,
    pub normalized: NormalizedAltitude,
}

/// A labeled synthetic corpus, balanced over the bins of its scheme.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub scheme: BinScheme,
    pub items: Vec<CorpusItem>,
}

/// Generate `per_bin` scenes per bin, with altitudes drawn uniformly inside
/// each bin interval. Deterministic given the seed.
pub fn build_corpus(
    scheme: &BinScheme,
    per_bin: usize,
    cfg: &SceneConfig,
    seed_value: u64,
) -> Result<Corpus> {
    if per_bin == 0 {
        return Err(Error::domain("per_bin must be at least 1"));
    }
    cfg.validate()?;
    let edges = scheme.edges();
    let mut items = Vec::with_capacity(scheme.bin_count() * per_bin);
    let mut alt_rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, 0));
    for bin in 0..scheme.bin_count() {
        for j in 0..per_bin {
            let a = alt_rng.random_range(edges[bin]..edges[bin + 1]);
            let item_seed = seed::derive(seed_value, 1 + (bin * per_bin + j) as u64);
            let (image, _) = generate_scene(a, cfg, item_seed)?;
            items.push(CorpusItem {
                image,
                altitude_deg: a,
                normalized: scheme.normalize(a)?,
            });
        }
    }
    Ok(Corpus { scheme: scheme.clone(), items })
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn altitudes(&self) -> Vec<f64> {
        self.items.iter().map(|it| it.altitude_deg).collect()
    }

    /// Indices of daytime items (altitude above the horizon).
    pub fn daytime_indices(&self) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.altitude_deg > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// A seeded random subset of the daytime items: the small split on which
    /// structure tokens are optimized.
    pub fn structure_subset(&self, fraction: f64, seed_value: u64) -> Result<Vec<usize>> {
        if !(0.0 < fraction && fraction <= 1.0) {
            return Err(Error::domain(format!(
                "subset fraction must lie in (0, 1], got {fraction}"
            )));
        }
        let mut day = self.daytime_indices();
        if day.is_empty() {
            return Err(Error::domain("corpus has no daytime items"));
        }
        let take = ((day.len() as f64 * fraction).round() as usize).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed_value);
        // Partial Fisher-Yates: the first `take` entries are the sample.
        for i in 0..take.min(day.len() - 1) {
            let j = rng.random_range(i..day.len());
            day.swap(i, j);
        }
        day.truncate(take);
        day.sort_unstable();
        Ok(day)
    }

    /// Balanced with-replacement resampling over the corpus bins.
    pub fn resample(&self, target_per_bin: usize, seed_value: u64) -> Result<Vec<usize>> {
        binning::resample_balanced(&self.altitudes(), &self.scheme, target_per_bin, seed_value)
    }

    /// Write the corpus to a directory: `scene_NNNN.pgm` files, a
    /// `manifest.csv` with columns `path, altitude_deg, normalized, bin`,
    /// and the bin scheme as `bins.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("bins.json"), self.scheme.to_json())?;
        let mut wtr = csv::Writer::from_path(dir.join("manifest.csv"))
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        wtr.write_record(["path", "altitude_deg", "normalized", "bin"])
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        for (i, it) in self.items.iter().enumerate() {
            let name = format!("scene_{i:04}.pgm");
            write_pgm(&dir.join(&name), &it.image)?;
            wtr.write_record([
                name,
                format!("{}", it.altitude_deg),
                format!("{}", it.normalized.value),
                format!("{}", it.normalized.bin_index),
            ])
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Load a corpus written by [`Corpus::save`].
    pub fn load(dir: &Path) -> Result<Corpus> {
        let scheme = BinScheme::from_json(&fs::read_to_string(dir.join("bins.json"))?)?;
        let mut rdr = csv::Reader::from_path(dir.join("manifest.csv"))
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        let mut items = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| Error::Parse { line: i + 2, msg: e.to_string() })?;
            if row.len() != 4 {
                return Err(Error::Parse {
                    line: i + 2,
                    msg: format!("expected 4 columns, got {}", row.len()),
                });
            }
            let altitude_deg: f64 = row[1]
                .parse()
                .map_err(|e| Error::Parse { line: i + 2, msg: format!("altitude_deg: {e}") })?;
            let image = read_pgm(&dir.join(&row[0]))?;
            items.push(CorpusItem { image, altitude_deg, normalized: scheme.normalize(altitude_deg)? });
        }
        if items.is_empty() {
            return Err(Error::domain(format!("corpus at {} is empty", dir.display())));
        }
        Ok(Corpus { scheme, items })
    }
}

/// Result of lenient metadata ingestion: parsed records plus per-line
/// failures.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestOutcome {
    pub samples: Vec<GeoSample>,
    pub errors: Vec<RecordError>,
}

/// Parse JSONL metadata records, strictly typed. Strict mode aborts on the
/// first malformed line (naming it); lenient mode skips and reports. Line
/// numbers are 1-based; the `index` of a reported error is the line number.
pub fn ingest_metadata(text: &str, strict: bool) -> Result<IngestOutcome> {
    let mut samples = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<GeoSample>(line) {
            Ok(rec) => samples.push(rec),
            Err(e) => {
                if strict {
                    return Err(Error::Parse { line: i + 1, msg: e.to_string() });
                }
                errors.push(RecordError { index: i + 1, message: e.to_string() });
            }
        }
    }
    Ok(IngestOutcome { samples, errors })
}

/// Drop every sample tagged "rain" (case-insensitive); stable order.
pub fn filter_rain(samples: Vec<GeoSample>) -> Vec<GeoSample> {
    samples.into_iter().filter(|s| !s.has_tag("rain")).collect()
}
