use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use super::{clip_to_image, images::load_image, DataError, Dataset, DatasetFormat, DatasetManifest, SceneRecord};
use crate::geometry::BoundingBox;

#[derive(Deserialize)]
struct CocoFile {
    #[serde(default)]
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
}

/// Loads person boxes from a COCO annotation file. Boxes arrive as
/// `[x, y, w, h]` and are stored as corners, clipped to the image.
pub fn load_coco(annotation_file: &Path, image_root: &Path, person_category_id: u64) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(annotation_file)
        .map_err(|_| DataError::MissingFile(annotation_file.to_path_buf()))?;
    let coco: CocoFile = serde_json::from_str(&text).map_err(|e| DataError::MalformedJson {
        file: annotation_file.to_path_buf(),
        reason: e.to_string(),
    })?;
    if !coco.categories.iter().any(|c| c.id == person_category_id) {
        return Err(DataError::UnknownCategory(person_category_id));
    }

    let mut boxes: BTreeMap<u64, Vec<[f64; 4]>> = BTreeMap::new();
    for a in coco.annotations.iter().filter(|a| a.category_id == person_category_id) {
        boxes.entry(a.image_id).or_default().push(a.bbox);
    }

    let mut images: Vec<&CocoImage> = coco.images.iter().collect();
    images.sort_by_key(|im| im.id);
    let mut dropped = 0;
    let mut records = Vec::with_capacity(images.len());
    for im in images {
        let image = load_image(&image_root.join(&im.file_name))?;
        let mut person_boxes = Vec::new();
        for &[x, y, w, h] in boxes.get(&im.id).map(Vec::as_slice).unwrap_or(&[]) {
            match clip_to_image(BoundingBox::from_xywh(x, y, w, h), image.width(), image.height()) {
                Some(b) => person_boxes.push(b),
                None => dropped += 1,
            }
        }
        records.push(SceneRecord {
            id: im.id.to_string(),
            image,
            person_boxes,
        });
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} zero-area or out-of-frame person boxes");
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            root: image_root.to_path_buf(),
            format: DatasetFormat::CocoJson,
            class_filter: person_category_id.to_string(),
            record_count: records.len(),
        },
        records,
        dropped_boxes: dropped,
    })
}
