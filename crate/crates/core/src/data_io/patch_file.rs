//! Patch sidecar: a 16-byte header (`TPCH`, u32 height, u32 width, u32
//! reserved, all little-endian) followed by row-major `(H, W, 3)` f32 values.

use std::path::Path;

use ndarray::Array3;

use super::{images::write_png, DataError};
use crate::raster::{Patch, CHANNELS};

pub const SIDECAR_MAGIC: &[u8; 4] = b"TPCH";
const HEADER: usize = 16;

/// 8-bit quantization with ties rounded up.
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn save_patch(path: &Path, patch: &Patch) -> Result<(), DataError> {
    let mut buf = Vec::with_capacity(HEADER + patch.as_slice().len() * 4);
    buf.extend_from_slice(SIDECAR_MAGIC);
    buf.extend_from_slice(&(patch.height() as u32).to_le_bytes());
    buf.extend_from_slice(&(patch.width() as u32).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for &v in patch.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| DataError::Write {
        file: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn load_patch(path: &Path) -> Result<Patch, DataError> {
    let bytes = std::fs::read(path).map_err(|_| DataError::MissingFile(path.to_path_buf()))?;
    if bytes.len() < 4 || &bytes[..4] != SIDECAR_MAGIC {
        return Err(DataError::BadMagic(path.to_path_buf()));
    }
    if bytes.len() < HEADER {
        return Err(DataError::Truncated(path.to_path_buf()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (height, width) = (word(4), word(8));
    let payload = &bytes[HEADER..];
    let expected = height * width * CHANNELS;
    if payload.len() < expected * 4 {
        return Err(DataError::Truncated(path.to_path_buf()));
    }
    if height == 0 || width == 0 || payload.len() != expected * 4 {
        return Err(DataError::DimensionMismatch {
            file: path.to_path_buf(),
            height,
            width,
            values: payload.len() / 4,
        });
    }
    let mut values = Vec::with_capacity(expected);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !(0.0..=1.0).contains(&v) {
            return Err(DataError::PatchValue {
                file: path.to_path_buf(),
                value: v,
            });
        }
        values.push(f64::from(v));
    }
    let arr = Array3::from_shape_vec((height, width, CHANNELS), values).expect("length checked");
    Ok(Patch::from_clamped(arr))
}

/// Human-readable 8-bit preview; `text` becomes PNG text chunks.
pub fn save_patch_png(path: &Path, patch: &Patch, text: &[(&str, &str)]) -> Result<(), DataError> {
    write_png(path, patch.height(), patch.width(), patch.as_slice(), text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_patch() -> Patch {
        let mut p = Patch::from_clamped(Array3::from_shape_fn((3, 5, 3), |(i, j, c)| {
            ((i * 15 + j * 3 + c) as f64 * 0.0217).fract()
        }));
        p.quantize_f32();
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.tpch");
        let p = sample_patch();
        save_patch(&path, &p).unwrap();
        let q = load_patch(&path).unwrap();
        assert_eq!(p.as_slice().len(), q.as_slice().len());
        for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.tpch");
        save_patch(&path, &sample_patch()).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        let e = load_patch(&path).unwrap_err();
        assert!(e.to_string().contains("bad magic"), "{e}");

        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(load_patch(&path), Err(DataError::Truncated(_))));

        let mut long = good.clone();
        long.extend_from_slice(&[0; 12]);
        std::fs::write(&path, &long).unwrap();
        assert!(matches!(load_patch(&path), Err(DataError::DimensionMismatch { .. })));

        assert!(matches!(
            load_patch(&dir.path().join("absent")),
            Err(DataError::MissingFile(_))
        ));
    }

    #[test]
    fn png_quantization_rounds_half_up() {
        assert_eq!(quantize_u8(0.5), 128);
        assert_eq!(quantize_u8(0.0), 0);
        assert_eq!(quantize_u8(1.0), 255);
        assert_eq!(quantize_u8(1.5 / 255.0), 2);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        save_patch_png(&path, &Patch::filled(2, 2, 0.5), &[("run", "test")]).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert!(img.pixels().all(|p| p.0 == [128, 128, 128]));
    }
}
