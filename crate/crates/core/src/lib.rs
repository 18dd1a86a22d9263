//! Self-supervised pre-training on multi-instance scenes: overlapping scene
//! views that share a set of candidate instances, a siamese online/target
//! network pair, and a three-level objective (scene-scene, scene-instance,
//! and instance-instance matching through entropic optimal transport).

pub mod checks;
pub mod data;
pub mod error;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod model;
pub mod ot;
pub mod profile;
pub mod proposals;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod views;

pub use error::{Error, Result};
pub use geometry::{Bbox, FilterConfig};
pub use image::Image;
pub use profile::Profile;
