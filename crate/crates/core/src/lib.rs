//! Adversarial patch training and evaluation against person detectors.
//!
//! A patch is composited onto every person in a scene, pushed through a
//! random physical-nuisance augmentation, and optimized so a differentiable
//! detector stops reporting those persons. Evaluation treats a detector's own
//! clean output as ground truth and reports person AP and attack success
//! rate, also for detectors reached only through a subprocess.

pub mod augment;
pub mod compositor;
pub mod data_io;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod optimizer;
pub mod raster;
pub mod warp;

pub use error::{Error, Result};
pub use geometry::{BoundingBox, Detection};
pub use raster::{Patch, SceneImage};
