//! Low-shot hyperspectral semantic segmentation.
//!
//! The pipeline has two learned pieces: a stacked multi-loss convolutional
//! autoencoder ([`smcae`]) trained without labels to extract per-pixel
//! features, and a semi-supervised MLP ([`ssmlp`]) trained on a handful of
//! labeled pixels per class plus unlabeled pixels. Around them sit spectral
//! band resampling ([`spectral`]), file formats and synthetic scenes
//! ([`dataio`]), evaluation metrics ([`eval`]), and a command-line front end
//! ([`cli`]). See the `examples/` directory for runnable entry points into
//! each capability.

pub mod cli;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod mcae;
pub mod optim;
pub mod scalar;
pub mod smcae;
pub mod spectral;
pub mod ssmlp;

pub use error::{Error, Result};
