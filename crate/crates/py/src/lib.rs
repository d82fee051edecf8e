//! Python bindings for the solalt core: solar ephemeris, bin-residual
//! normalization, synthetic scenes, and the evaluation metrics. Images
//! cross the boundary as `(width, height, pixels)` with row-major pixel
//! lists, so no array library is required on either side.

use chrono::{DateTime, Utc};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use solalt::binning::BinScheme;
use solalt::dataprep::{generate_scene, SceneConfig};
use solalt::ephemeris::{self, GeoTime};
use solalt::img::Image;
use solalt::metrics;

fn pyerr(e: solalt::Error) -> PyErr {
    match e {
        solalt::Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_utc(utc: &str) -> PyResult<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(utc)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| PyValueError::new_err(format!("bad utc timestamp {utc:?}: {e}")))
}

/// Solar altitude in degrees above the horizon for an observer at
/// (lat, lon) at an RFC 3339 UTC instant; negative below the horizon.
#[pyfunction]
#[pyo3(signature = (lat, lon, utc, refracted = false))]
fn solar_altitude(lat: f64, lon: f64, utc: &str, refracted: bool) -> PyResult<f64> {
    let gt = GeoTime::new(lat, lon, parse_utc(utc)?).map_err(pyerr)?;
    let pos = if refracted {
        ephemeris::solar_altitude_refracted(&gt)
    } else {
        ephemeris::solar_altitude(&gt)
    }
    .map_err(pyerr)?;
    Ok(pos.altitude_deg)
}

/// Julian day number of an RFC 3339 UTC instant.
#[pyfunction]
fn julian_day(utc: &str) -> PyResult<f64> {
    ephemeris::julian_day(parse_utc(utc)?).map_err(pyerr)
}

/// Bin-residual altitude normalization over a fixed edge list.
#[pyclass(name = "BinScheme")]
struct PyBinScheme {
    inner: BinScheme,
}

#[pymethods]
impl PyBinScheme {
    #[new]
    fn new(edges: Vec<f64>) -> PyResult<Self> {
        Ok(PyBinScheme { inner: BinScheme::new(edges).map_err(pyerr)? })
    }

    /// Parse an edge list such as "a_min,-6,-4,-2,a_max", resolving the
    /// keywords from the optional arguments.
    #[staticmethod]
    #[pyo3(signature = (spec, a_min = None, a_max = None))]
    fn parse_spec(spec: &str, a_min: Option<f64>, a_max: Option<f64>) -> PyResult<Self> {
        Ok(PyBinScheme { inner: BinScheme::parse_spec(spec, a_min, a_max).map_err(pyerr)? })
    }

    #[getter]
    fn edges(&self) -> Vec<f64> {
        self.inner.edges().to_vec()
    }

    /// Bin index of an altitude, capped at the top bin.
    fn quantize(&self, a: f64) -> PyResult<usize> {
        self.inner.quantize(a).map_err(pyerr)
    }

    /// Normalized offset of an altitude within its bin.
    fn residual(&self, a: f64) -> PyResult<f64> {
        self.inner.residual(a).map_err(pyerr)
    }

    /// (bin index + residual) / bin count, in [0, 1].
    fn normalize(&self, a: f64) -> PyResult<f64> {
        Ok(self.inner.normalize(a).map_err(pyerr)?.value)
    }

    /// Exact piecewise-linear inverse of `normalize`.
    fn denormalize(&self, v: f64) -> PyResult<f64> {
        self.inner.denormalize(v).map_err(pyerr)
    }

    fn __repr__(&self) -> String {
        format!("BinScheme(edges={:?})", self.inner.edges())
    }
}

type PyImage = (usize, usize, Vec<f64>);

fn to_image((width, height, pixels): PyImage) -> PyResult<Image> {
    Image::from_vec(width, height, pixels).map_err(pyerr)
}

/// Render one synthetic scene at the given solar altitude. Returns
/// (width, height, pixels) with row-major pixels in [0, 1].
#[pyfunction]
#[pyo3(signature = (altitude_deg, width = 32, height = 32, seed = 0))]
fn scene(altitude_deg: f64, width: usize, height: usize, seed: u64) -> PyResult<PyImage> {
    let cfg = SceneConfig { width, height, ..SceneConfig::default() };
    let (img, _) = generate_scene(altitude_deg, &cfg, seed).map_err(pyerr)?;
    Ok((img.width(), img.height(), img.pixels().to_vec()))
}

/// Blind second-difference estimate of the Gaussian noise sigma in an
/// image given as (width, height, pixels).
#[pyfunction]
fn estimate_noise_sigma(image: PyImage) -> PyResult<f64> {
    metrics::estimate_noise_sigma(&to_image(image)?).map_err(pyerr)
}

/// Mean pixel value of an image given as (width, height, pixels).
#[pyfunction]
fn mean_luminance(image: PyImage) -> PyResult<f64> {
    Ok(to_image(image)?.mean())
}

/// The 8 handcrafted distribution features of one image.
#[pyfunction]
fn extract_features(image: PyImage) -> PyResult<Vec<f64>> {
    metrics::extract_features(&to_image(image)?).map_err(pyerr)
}

/// Consecutive differences of a noise-level sequence.
#[pyfunction]
fn delta_sigma(sigmas: Vec<f64>) -> PyResult<Vec<f64>> {
    metrics::delta_sigma(&sigmas).map_err(pyerr)
}

/// Fréchet distance between Gaussians fit to two feature-vector sets
/// (each a list of equal-length feature rows).
#[pyfunction]
fn frechet_gaussian(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    let sa = metrics::fit_stats(&a).map_err(pyerr)?;
    let sb = metrics::fit_stats(&b).map_err(pyerr)?;
    metrics::frechet_gaussian(&sa, &sb).map_err(pyerr)
}

/// Spearman rank correlation of two equal-length sequences.
#[pyfunction]
fn spearman(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    metrics::spearman(&a, &b).map_err(pyerr)
}

#[pymodule]
fn solalt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(solar_altitude, m)?)?;
    m.add_function(wrap_pyfunction!(julian_day, m)?)?;
    m.add_function(wrap_pyfunction!(scene, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_noise_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(mean_luminance, m)?)?;
    m.add_function(wrap_pyfunction!(extract_features, m)?)?;
    m.add_function(wrap_pyfunction!(delta_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_class::<PyBinScheme>()?;
    Ok(())
}
