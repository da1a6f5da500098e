//! Anti-spoofing classifiers and their training recipe.
//!
//! Models are built on candle with weights initialized from a seeded
//! variable store, so a `(config, seed)` pair always yields the same network.

use std::path::PathBuf;

use thiserror::Error;

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod optim;
pub mod score;
pub mod store;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{ModelConfig, Variant};
pub use model::{build_model, build_ssl_head, ChannelGate, Classifier, FrameEncoder, GateKind, StubEncoder};
pub use score::score_manifest;
pub use trainer::{lr_at, ssl_training_policy, train, TrainConfig, TrainHistory};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("encoder emits {actual}-dim frames, head expects {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("training set has a single class ({bona_fide} bona fide of {items})")]
    SingleClass { items: usize, bona_fide: usize },
    #[error("loss became {loss} at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: u64, loss: f64 },
    #[error("audio missing for {missing} of {total} records")]
    MissingAudio { missing: usize, total: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Frontend(#[from] accent_core::frontend::FrontendError),
    #[error(transparent)]
    Augment(#[from] accent_core::augment::AugmentError),
    #[error(transparent)]
    Eval(#[from] accent_core::eval::EvalError),
}
