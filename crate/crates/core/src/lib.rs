//! Fingerprint image denoising with a dilated-convolution encoder-decoder.
//!
//! The crate is self-contained: a small reverse-mode tensor engine
//! ([`tensor`]), the network built on it ([`network`]), its training protocol
//! ([`trainer`]), PSNR/SSIM evaluation ([`metrics`]), and a synthetic
//! fingerprint dataset generator with PGM I/O ([`data`]).

pub mod data;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod trainer;

/// Random generator used everywhere a seeded stream is required.
pub type Rng = rand_chacha::ChaCha8Rng;
