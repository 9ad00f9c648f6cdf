//! Unsupervised image animation with a transformer-based motion estimator.
//!
//! The pipeline discovers object parts from raw video: learnable motion
//! tokens attend over image patch tokens, decode to per-part keypoints and
//! local affines, which drive a mask-weighted dense flow that warps the
//! source image for reconstruction. Training needs only (source, driving)
//! frame pairs from the same video.

pub mod data;
pub mod dense_motion;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod generator;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod numerics;
pub mod params;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
