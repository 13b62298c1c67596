//! Continuous speech separation with a Conformer mask estimator.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! * [`dsp`]: STFT analysis/synthesis, spatial input features, masking.
//! * [`model`]: the Conformer mask estimator with relative-position
//!   attention and an optional cross-chunk key/value cache.
//! * [`pipeline`]: chunk-wise streaming separation, output-channel
//!   alignment and the single-speaker channel merge.
//! * [`mvdr`]: mask-driven MVDR beamforming for microphone arrays.
//! * [`sim`]: image-method room simulation and synthetic mixtures.
//! * [`train`]: PIT loss, AdamW, the learning-rate schedule, toy training
//!   and separation metrics.

pub mod audio;
pub mod dsp;
mod error;
pub mod model;
pub mod mvdr;
pub mod pipeline;
pub mod sim;
pub mod train;

pub use error::{CssError, Result};

/// Sample precision used throughout the crate (`f32` or `f64`).
pub trait Float: css_tensor::Real + realfft::FftNum {}

impl<T: css_tensor::Real + realfft::FftNum> Float for T {}
