//! Histology-to-spatial-expression engine.
//!
//! A convolutional autoencoder is trained on H&E tiles; its encoder is then
//! frozen and topped with a small convolution + fully connected head that
//! regresses per-spot gene expression. Around that core sit stain
//! preprocessing, dataset ingestion and synthesis, leave-one-patient-out
//! cross-validation, and cluster-based tissue characterization.

pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod imageprep;
pub mod models;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
