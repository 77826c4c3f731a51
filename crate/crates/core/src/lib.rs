//! Multiscale periodic time-series classification.
//!
//! The pipeline finds the dominant periods of a training set from its
//! averaged FFT amplitude spectrum, folds every series onto each period
//! grid, extracts intra-period features with a bank of parallel 1D
//! convolutions, relates the resulting period segments with multi-head
//! self-attention, and fuses the scales with weights derived from each
//! sample's own spectral amplitudes.
//!
//! Modules:
//! - [`numerics`]: dense tensors with a reverse-mode gradient tape.
//! - [`spectral`]: amplitude spectra, main-period selection, period folding.
//! - [`model`]: the network itself and its attention records.
//! - [`data`]: `.ts` archive parsing, normalization, batching, synthetic sets.
//! - [`train`]: Adam, the training loop, evaluation and checkpoints.

pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod spectral;
pub mod train;

pub use error::{Error, Result};
