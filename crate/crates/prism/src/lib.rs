//! Language-guided counterfactual image generation, end to end, at desk scale.
//!
//! The pipeline fine-tunes a small latent diffusion model on a procedurally
//! generated, deliberately confounded image corpus, inverts images with
//! null-text optimization, edits them with attention-controlled guidance,
//! scores the edits with a contrastive text/image embedding pair, and
//! measures whether the counterfactuals de-bias a downstream classifier.

pub mod captions;
pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod editor;
pub mod encoders;
pub mod eval;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod schedule;
pub mod synthdata;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value in {op} during {phase}")]
    NonFinite { op: String, phase: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("caption error: {0}")]
    Caption(String),
    #[error("out-of-vocabulary word: {0:?}")]
    OutOfVocab(String),
    #[error("degenerate edit: {0}")]
    DegenerateEdit(String),
    #[error("optimization diverged: {0}")]
    Diverged(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
