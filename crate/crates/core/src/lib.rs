//! Affine-invariant feature detection, description, matching and
//! statistical geometric verification.

pub mod affine;
pub mod config;
pub mod descriptor;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geomcheck;
pub mod image;
pub mod io;
pub mod kernel;
pub mod matcher;
pub mod pipeline;
pub mod scalespace;
pub mod selftest;
pub mod synth;

pub use affine::AffineParams;
pub use error::{Error, Result};
pub use image::GrayImage;
