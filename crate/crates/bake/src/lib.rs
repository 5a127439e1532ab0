//! Students distilled from the analytic teacher: a hash-grid renderer that
//! answers material and visibility queries at arbitrary surface points, and
//! a CNN that maps a low-resolution ray map to a full-resolution G-buffer.

pub mod cnn;
pub mod distill;
pub mod hash;


pub use cnn::{CnnConfig, CnnSurface, DirectRenderer};
pub use hash::{HashConfig, HashGrid, HashRenderer};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] relight_core::Error),
    #[error(transparent)]
    Nn(#[from] relight_nn::Error),
    #[error("degenerate normal prediction")]
    DegenerateNormalPrediction,
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("resolution {0}x{1} is not divisible by {2}")]
    Indivisible(usize, usize, usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
