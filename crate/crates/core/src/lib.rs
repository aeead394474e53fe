//! Unsupervised representation learning for music signals.
//!
//! A denoising autoencoder maps a time-domain signal to a non-negative
//! `components x frames` representation with a strided, dilated two-layer
//! convolutional encoder, and back with a decoder whose kernels are
//! amplitude-modulated cosines. Training minimises neg-SNR on a noisy voice
//! input plus either a total-variation or an entropic Sinkhorn penalty on the
//! representation of a voice + accompaniment mixture.
//!
//! The crate also provides the evaluation suite (SI-SDR, oracle binary masking,
//! additivity, W-disjoint orthogonality, STFT baseline), WAV I/O, and a
//! versioned checkpoint format.

pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod training;
pub mod wav;

pub use dataset::{Signal, SAMPLE_RATE};
pub use error::{Error, Result};
pub use losses::{LossConfig, Objective};
pub use model::{Model, ModelConfig};
