//! Desk-scale multimodal ECG image interpretation.
//!
//! A two-stage vision encoder with tapped intermediate layers feeds a linear
//! projection into a cross-attending decoder. The whole stack runs on a small
//! reverse-mode autodiff engine, is fine-tuned with low-rank adapters, and is
//! trained and scored on synthetic ECG images.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod integration;
pub mod language;
pub mod lora;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod vision;

pub use autodiff::{OpKind, Tape, Var};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::MultimodalModel;
pub use tensor::Tensor;
