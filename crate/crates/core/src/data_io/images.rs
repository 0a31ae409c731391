use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::DynamicImage;
use ndarray::Array3;

use super::{patch_file::quantize_u8, DataError};
use crate::raster::{SceneImage, CHANNELS};

/// Decodes an image to RGB in [0, 1]. 8-bit sources are divided by 255,
/// 16-bit sources by 65535.
pub fn load_image(path: &Path) -> Result<SceneImage, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|e| DataError::Image {
        file: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<f64> = match img {
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => img
            .to_rgb16()
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) / 65535.0)
            .collect(),
        _ => img
            .to_rgb8()
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) / 255.0)
            .collect(),
    };
    let arr = Array3::from_shape_vec((h, w, CHANNELS), pixels).expect("decoded buffer has RGB layout");
    SceneImage::new(arr).map_err(|e| DataError::Image {
        file: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes an 8-bit RGB PNG with optional text chunks.
pub(crate) fn write_png(
    path: &Path,
    height: usize,
    width: usize,
    values: &[f64],
    text: &[(&str, &str)],
) -> Result<(), DataError> {
    let fail = |e: &dyn std::fmt::Display| DataError::Write {
        file: path.to_path_buf(),
        reason: e.to_string(),
    };
    let file = File::create(path).map_err(|e| fail(&e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    for (k, v) in text {
        enc.add_text_chunk(k.to_string(), v.to_string()).map_err(|e| fail(&e))?;
    }
    let mut writer = enc.write_header().map_err(|e| fail(&e))?;
    let bytes: Vec<u8> = values.iter().map(|&v| quantize_u8(v)).collect();
    writer.write_image_data(&bytes).map_err(|e| fail(&e))?;
    writer.finish().map_err(|e| fail(&e))
}

pub fn save_scene_png(path: &Path, image: &SceneImage) -> Result<(), DataError> {
    write_png(path, image.height(), image.width(), image.as_slice(), &[])
}
