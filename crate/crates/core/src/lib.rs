//! Sketch extraction trained on the internal features of a frozen face generator.
//!
//! The pipeline taps the feature maps a pretrained generator produces while
//! synthesizing a face, fuses them coarse-to-fine with spatial attention, and
//! decodes a sketch. Training needs only a handful of photo/sketch pairs because
//! the frozen generator carries the priors; everything here runs on the CPU in
//! f64 so runs are bit-reproducible.
//!
//! Crate layout:
//! - [`nn`]: tape-based reverse-mode autodiff over `ndarray`, plus Adam.
//! - [`tap`]: generator handles, feature schedules, latent inversion, the
//!   deterministic toy generator used for tests and demos.
//! - [`fusion`]: the sketch head (pairwise fusion, spatial attention, decode).
//! - [`parsing`], [`adapters`]: face-part masks and the pluggable perceptual /
//!   embedding / parsing / encoder / metric backends.
//! - [`losses`], [`trainer`], [`checkpoint`]: objectives, the two-stage loop,
//!   and bit-exact resume.
//! - [`apps`], [`config`]: extraction / editing / pair synthesis, experiment
//!   config, dataset ingest and metrics.

pub mod adapters;
pub mod apps;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fusion;
pub mod image;
pub mod losses;
pub mod nn;
pub mod npy;
pub mod parsing;
pub mod rng;
pub mod tap;
pub mod trainer;

pub use error::{Error, Result};
