//! Pose-free sparse-view 3D Gaussian splatting, desk scale.
//!
//! A feed-forward pipeline that maps a handful of unposed RGB images to a set
//! of pixel-aligned 3D Gaussians: a small frozen ViT encoder/decoder with
//! multi-scale convolutional adapters, a single-pass cross-view feature
//! fusion aggregator, point/Gaussian heads, and a CPU reference renderer.
//! Everything trains through a built-in reverse-mode autodiff engine with a
//! finite-difference gradient oracle.

pub mod augment;
pub mod bench;
pub mod diff;
pub mod error;
pub mod ffa;
pub mod gaussian;
pub mod heads;
pub mod img;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod musa;
pub mod perceptual;
pub mod pointmap;
pub mod pose;
pub mod run;
pub mod scene;
pub mod splat;
pub mod tokens;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
