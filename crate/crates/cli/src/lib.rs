//! The `relight` command: pseudo-data extraction, training of the baked
//! renderers, rendering with either the teacher or the baked providers,
//! image evaluation and stage benchmarks.

pub mod commands;
pub mod manifest;
pub mod render;
pub mod settings;

use std::path::PathBuf;

pub use settings::{Provider, Settings};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] relight_core::Error),
    #[error(transparent)]
    Nn(#[from] relight_nn::Error),
    #[error(transparent)]
    Bake(#[from] relight_bake::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 3 for numeric failures, 2 for everything else (bad config, missing
    /// or unreadable files).
    pub fn exit_code(&self) -> i32 {
        use relight_bake::Error as B;
        match self {
            Error::Numeric(_)
            | Error::Bake(B::NonFiniteLoss(_) | B::DegenerateNormalPrediction)
            | Error::Bake(B::Nn(relight_nn::Error::NonFiniteGradient(_)))
            | Error::Nn(relight_nn::Error::NonFiniteGradient(_))
            | Error::Core(relight_core::Error::DegenerateNormal) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
