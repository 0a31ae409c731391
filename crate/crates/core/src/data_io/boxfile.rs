use std::path::Path;

use super::{clip_to_image, images::load_image, DataError, Dataset, DatasetFormat, DatasetManifest, SceneRecord};
use crate::geometry::BoundingBox;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

/// Pairs every image `name.ext` in `image_dir` with `boxes_dir/name.txt`,
/// one `x1 y1 x2 y2` box per line. A missing box file means no boxes.
pub fn load_boxfile_dir(image_dir: &Path, boxes_dir: &Path) -> Result<Dataset, DataError> {
    let entries = std::fs::read_dir(image_dir).map_err(|_| DataError::MissingFile(image_dir.to_path_buf()))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();

    let mut dropped = 0;
    let mut records = Vec::with_capacity(paths.len());
    for path in paths {
        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
        let image = load_image(&path)?;
        let box_path = boxes_dir.join(format!("{stem}.txt"));
        let mut person_boxes = Vec::new();
        if box_path.exists() {
            let text = std::fs::read_to_string(&box_path).map_err(|_| DataError::MissingFile(box_path.clone()))?;
            for b in parse_boxes(&text, &box_path)? {
                match clip_to_image(b, image.width(), image.height()) {
                    Some(b) => person_boxes.push(b),
                    None => dropped += 1,
                }
            }
        }
        records.push(SceneRecord {
            id: stem,
            image,
            person_boxes,
        });
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} zero-area or out-of-frame person boxes");
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            root: image_dir.to_path_buf(),
            format: DatasetFormat::BoxfileDir,
            class_filter: crate::losses::PERSON_LABEL.to_string(),
            record_count: records.len(),
        },
        records,
        dropped_boxes: dropped,
    })
}

fn parse_boxes(text: &str, file: &Path) -> Result<Vec<BoundingBox>, DataError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = || DataError::BoxParse {
            file: file.to_path_buf(),
            line: i + 1,
            text: line.to_string(),
        };
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<_>>()
            .ok_or_else(err)?;
        let [x1, y1, x2, y2] = vals[..] else {
            return Err(err());
        };
        out.push(BoundingBox::new(x1, y1, x2, y2));
    }
    Ok(out)
}
