//! Desk-scale image-to-LiDAR knowledge transfer.
//!
//! The pipeline projects per-point semantic labels into sparse label images,
//! densifies them with a promptable segmenter, and distills patch-level
//! teacher predictions into a lightweight point-branch student, with low-rank
//! adapters fine-tuning the frozen teacher stages.

pub mod autodiff;
pub mod ckpt;
pub mod cli;
pub mod datasets;
pub mod distill;
pub mod exec;
pub mod geometry;
pub mod labelgen;
pub mod metrics;
pub mod nets;
pub mod peft;
pub mod tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
