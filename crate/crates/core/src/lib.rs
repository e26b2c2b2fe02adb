//! Surface reconstruction from a handful of posed RGB views.
//!
//! The scene is a neural signed-distance field trained against three
//! signals: a photometric loss on volume-rendered colors, an Eikonal
//! regularizer on the field gradient, and a consistency loss between
//! normals estimated from depth maps and the field gradient at directly
//! localized zero-crossing surface points.
//!
//! Modules follow the pipeline: [`scene`] generates synthetic ground
//! truth, [`field`] holds the networks, [`render`] samples and composites
//! rays, [`surface`] localizes the zero level set, [`normals`] prepares
//! depth-derived supervision, [`train`] optimizes, and [`mesh`] extracts
//! and scores the result.

pub mod config;
pub mod field;
pub mod formats;
pub mod mesh;
pub mod normals;
pub mod render;
pub mod scene;
pub mod surface;
pub mod train;

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("camera: {0}")]
    Camera(String),

    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    PixelOutOfRange {
        u: usize,
        v: usize,
        width: usize,
        height: usize,
    },

    #[error("invalid data at pixel ({u}, {v}): {detail}")]
    Data { u: usize, v: usize, detail: String },

    #[error("configuration: {0}")]
    Config(String),

    #[error("metric requires a non-empty mesh: {0}")]
    EmptyMesh(&'static str),

    #[error("non-finite loss at step {step}; ray batch dumped to {dump}")]
    NumericAbort { step: usize, dump: PathBuf },

    #[error(transparent)]
    Autodiff(#[from] sdfrec_autodiff::AdError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// World-space vector type used across the public API.
pub type Vec3 = nalgebra::Vector3<f64>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
