//! Differentiable vision-transformer engine with pluggable visual-prompt-tuning
//! structures.
//!
//! The crate is organised around a small f64 tensor/tape layer (`tensor`, `tape`),
//! a minimal ViT backbone (`vit`), a registry of prompt structures (`prompts`),
//! attentive reinforcement of salient image tokens (`ar`), numeric verification
//! of the attention re-weighting decomposition (`analysis`), a frozen-backbone
//! training loop (`train`), synthetic data generators (`data`), and an
//! experiment harness (`harness`) driving sweeps behind the CLI.

pub mod analysis;
pub mod ar;
pub mod data;
pub mod harness;
pub mod model;
pub mod prompts;
pub mod rng;
pub mod snapshot;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vit;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Data(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
