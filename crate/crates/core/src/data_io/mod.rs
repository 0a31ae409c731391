//! Dataset ingestion, synthetic scenes and patch persistence.

mod boxfile;
mod coco;
mod images;
mod patch_file;
mod synthetic;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BoundingBox;
use crate::raster::SceneImage;

pub use boxfile::load_boxfile_dir;
pub use coco::load_coco;
pub use images::{load_image, save_scene_png};
pub use patch_file::{load_patch, quantize_u8, save_patch, save_patch_png, SIDECAR_MAGIC};
pub use synthetic::{generate_synthetic, SyntheticConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("malformed JSON in {file}: {reason}")]
    MalformedJson { file: PathBuf, reason: String },

    #[error("unknown category id {0}")]
    UnknownCategory(u64),

    #[error("{file}:{line}: expected `x1 y1 x2 y2`, got {text:?}")]
    BoxParse { file: PathBuf, line: usize, text: String },

    #[error("cannot read image {file}: {reason}")]
    Image { file: PathBuf, reason: String },

    #[error("bad magic in {0}")]
    BadMagic(PathBuf),

    #[error("dimension mismatch in {file}: header says {height}x{width}x3, payload holds {values} values")]
    DimensionMismatch {
        file: PathBuf,
        height: usize,
        width: usize,
        values: usize,
    },

    #[error("truncated file {0}")]
    Truncated(PathBuf),

    #[error("patch file {file} holds a value outside [0, 1]: {value}")]
    PatchValue { file: PathBuf, value: f32 },

    #[error("could not place {targets} non-overlapping targets in scene {scene} after {attempts} attempts")]
    PlacementFailed {
        scene: usize,
        targets: usize,
        attempts: usize,
    },

    #[error("cannot write {file}: {reason}")]
    Write { file: PathBuf, reason: String },
}

/// One scene: the image and its person boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub image: SceneImage,
    pub person_boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    CocoJson,
    BoxfileDir,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub format: DatasetFormat,
    /// Person category id (COCO) or label the boxes stand for.
    pub class_filter: String,
    pub record_count: usize,
}

/// Records plus what loading had to discard.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<SceneRecord>,
    /// Zero-area or out-of-frame boxes dropped while loading.
    pub dropped_boxes: usize,
}

/// Clips a box to the image and reports whether anything is left.
pub(crate) fn clip_to_image(b: BoundingBox, width: usize, height: usize) -> Option<BoundingBox> {
    let c = b.clip(width as f64, height as f64);
    (c.area() > 0.0).then_some(c)
}
