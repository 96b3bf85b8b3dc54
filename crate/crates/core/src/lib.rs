//! Voxel-grid radiance fields with distilled feature grids and a
//! generalizable attention-based 3D super-resolution refiner.
//!
//! The pipeline, end to end:
//!
//! 1. [`scenegen`] builds procedural scenes and renders analytic ground
//!    truth at any resolution (the dataset oracle).
//! 2. [`teacher`] trains a small convolutional autoencoder on procedural
//!    textures; its encoder provides pixel-aligned feature maps, its
//!    frozen per-pixel decoder maps features back to RGB.
//! 3. [`fieldrecon`] optimizes a density grid, a feature grid, and a small
//!    view-conditioning MLP per scene against low-resolution views, with a
//!    feature-distillation loss tying every scene to the teacher's latent
//!    space.
//! 4. [`voxelgridsr`] refines any such field point-by-point with
//!    density- and distance-aware attention over the 8 surrounding grid
//!    corners, producing a sharper feature and density at a continuous
//!    query position.
//! 5. [`srtrain`] trains the refiner once across several frozen fields
//!    against high-resolution supervision; the result applies to unseen
//!    scenes without per-scene fine-tuning.
//!
//! All training math runs in f64 on a small hand-rolled reverse-mode tape
//! ([`diffmath`]), which keeps finite-difference verification tight.

pub mod camera;
pub mod checkpoint;
pub mod img;
pub mod diffmath;
pub mod fieldrecon;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod scenegen;
pub mod srtrain;
pub mod teacher;
pub mod vec3;
pub mod voxelgrid;
pub mod voxelgridsr;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{name}`: {detail}")]
    ShapeMismatch { name: String, detail: String },

    #[error("duplicate parameter entry `{0}`")]
    DuplicateEntry(String),

    #[error("unknown parameter entry `{0}`")]
    UnknownEntry(String),

    #[error("non-finite gradient in entry `{0}`")]
    NonFiniteGrad(String),

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error at {path}: {detail}")]
    Dataset { path: String, detail: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
