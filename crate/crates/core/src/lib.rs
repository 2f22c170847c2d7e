//! Prostate cancer detection from micro-ultrasound RF data.
//!
//! The crate covers the whole workflow: needle-trace ROI extraction and
//! preprocessing, synthetic RF data generation, patient-grouped nested
//! cross-validation, VICReg self-supervised pre-training of image encoders,
//! ROI-scale classification with per-core averaging, multi-scale core
//! classification with a 12-layer BERT-style transformer trained under a
//! multi-objective (core + ROI) cross-entropy, and the evaluation report.
//!
//! Tensor work is done with `candle`; everything that is not a neural
//! network forward/backward pass (geometry, preprocessing, splits, metrics)
//! is plain Rust over `f32`/`f64` buffers.

pub mod backbones;
pub mod data;
pub mod error;
pub mod experiment;
pub mod finetune;
pub mod metrics;
pub mod multiscale;
pub mod nn;
pub mod seed;
pub mod splits;
pub mod tensor_io;
pub mod training;
pub mod vicreg;

pub use error::{Error, Result};

/// Side length of a preprocessed ROI patch.
pub const ROI_SIZE: usize = 256;

/// Number of ROI patches extracted along each needle trace.
pub const PATCHES_PER_CORE: usize = 55;
