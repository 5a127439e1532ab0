//! Physically based relighting toolkit: geometry and sampling, the GGX
//! BRDF, equirectangular environment lighting, analytic SDF teacher scenes,
//! the MIS direct/two-bounce integrator, a spatial SVGF denoiser and image
//! metrics.

pub mod brdf;
pub mod envlight;
pub mod geom;
pub mod image;
pub mod integrator;
pub mod metrics;
pub mod scene;
pub mod svgf;

use std::path::PathBuf;

pub use glam::DVec3;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate normal")]
    DegenerateNormal,
    #[error("roughness {0} outside [0.09, 1.0]")]
    RoughnessOutOfRange(f64),
    #[error("unsampleable light: environment map has no energy")]
    UnsampleableLight,
    #[error("pose space exhausted after {0} consecutive rejections")]
    PoseSpaceExhausted(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid environment map: {0}")]
    InvalidEnvironment(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("image {0} is smaller than the {1}x{1} window")]
    ImageTooSmall(String, usize),
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
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

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Error {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Rec.709 luminance.
#[inline]
pub fn luminance(c: DVec3) -> f64 {
    0.2126 * c.x + 0.7152 * c.y + 0.0722 * c.z
}
