//! Solar-altitude illumination priors for conditional image generation.
//!
//! The crate computes solar altitude from (latitude, longitude, UTC time),
//! normalizes it with a bin-residual scheme, and conditions a desk-scale
//! pixel-space diffusion model on the result: dynamic RBF/SALN context
//! tokens, learned structure tokens, partial DDIM sampling, and a noise- and
//! distribution-based evaluation stack.
//!
//! Modules follow the pipeline order:
//!
//! * [`ephemeris`] — solar altitude from geographic coordinates and UTC time
//! * [`binning`] — scalar quantization with residual encoding, resampling
//! * [`dataprep`] — metadata ingestion and the synthetic illumination corpus
//! * [`encoder`] — RBF feature enrichment and SALN-modulated context tokens
//! * [`diffusion`] — noise schedule, toy denoiser, DDIM, guided sampling
//! * [`training`] — AdamW, base/token/context training, gradient checking
//! * [`metrics`] — blind noise estimation, Δσ increments, Fréchet proxy

pub mod binning;
pub mod container;
pub mod dataprep;
pub mod diffusion;
pub mod encoder;
pub mod ephemeris;
mod error;
pub mod img;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
