//! Band-split time-frequency source separation.
//!
//! The crate covers the full desk-scale pipeline: STFT front end, a small
//! reverse-mode tensor engine, the band-split encoder, the interleaved
//! two-path separator, training with permutation-invariant losses, synthetic
//! mixture generation, metrics, and a cost profiler. Everything is generic
//! over the float type via [`Scalar`]; `f32` is the runtime precision,
//! `f64` is used where tests need tight tolerances.

pub mod bandsplit;
pub mod config;
pub mod dsp;
pub mod metrics;
pub mod mixgen;
pub mod profiler;
pub mod model;
pub mod separator;
pub mod training;
pub mod error;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Runtime-precision waveform.
pub type WaveformF32 = dsp::Waveform<f32>;
/// Test-precision waveform.
pub type WaveformF64 = dsp::Waveform<f64>;
pub type SpectrogramF32 = dsp::ComplexSpectrogram<f32>;
pub type SpectrogramF64 = dsp::ComplexSpectrogram<f64>;
