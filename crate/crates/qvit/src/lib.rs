//! Desk-scale quantization-aware-training laboratory for vision transformers.
//!
//! The crate bundles a tiny tape-based autodiff engine, integer quantizers
//! with straight-through gradients, a quantized ViT with an entropy-driven
//! rectifier on the attention inputs, similarity-matrix distillation, LAMB
//! training, and the analysis instruments (entropy reports, histograms,
//! attention distances, ablation/sensitivity suites) used to evaluate it.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod distill;
pub mod error;
pub mod model;
pub mod optim;
pub mod quant;
pub mod suites;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
