//! Object detection from selective-search proposals scored by three feature
//! channels (HOG templates, improved Fisher vectors and externally supplied
//! CNN vectors), combined by a stacked linear SVM, refined by box regression
//! and gated by a whole-image presence prior.

pub mod error;
pub mod geometry;
pub mod image;
pub mod features;
pub mod proposals;
pub mod persist;
pub mod classify;
pub mod regress;
pub mod context;
pub mod eval;
pub mod manifest;
pub mod synth;
pub mod config;
pub mod pipeline;

pub use error::{Error, Result};
pub use geometry::{BBox, Detection, GroundTruth};
pub use image::Image;
