//! Multi-granularity patch transformer for multivariate ECG classification.
//!
//! The pipeline: raw multichannel recordings are resampled, standardized,
//! and cut into windows ([`preprocess`]); windows are optionally augmented
//! ([`augment`]), sliced into patches at several granularities and embedded
//! through a residual convolutional encoder ([`embedding`]); a two-stage
//! attention encoder exchanges information within each granularity and then
//! across granularities through per-granularity router tokens
//! ([`attention`], [`model`]); training, evaluation, and metrics live in
//! [`training`] and [`metrics`]. Everything runs on the in-crate
//! reverse-mode tape in [`numerics`] — training in `f32`, gradient checks in
//! `f64` — with no external tensor runtime.

pub mod dataio;
pub mod metrics;
pub mod numerics;
pub mod preprocess;

/// CLI entry point; returns the process exit code.
pub fn run() -> i32 {
    0
}
