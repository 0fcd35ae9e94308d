//! Image and raw-float file I/O.
//!
//! PNG files are 8-bit grayscale (RGB for overlays). Raw planar files start
//! with a 16-byte header: magic `SSUF`, dtype code (`1` = little-endian
//! f32), height, width, each a little-endian u32 after the magic, followed
//! by one or more `H×W` planes.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RAW_MAGIC: &[u8; 4] = b"SSUF";
pub const RAW_DTYPE_F32: u32 = 1;

fn plane_dims(t: &Tensor<f32>) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::usage(format!("cannot write tensor of shape {s:?} as an image")));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Read an image as grayscale `[1, H, W]` with values in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::ingestion(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Tensor::new(vec![1, h as usize, w as usize], data)
}

/// Write a single-plane tensor (`[.., H, W]`, one plane) as an 8-bit PNG.
/// Values are clamped to `[0, 1]` and rounded to the nearest level.
pub fn write_image(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w) = plane_dims(t)?;
    if t.numel() != h * w {
        return Err(Error::usage(format!(
            "write_image expects a single plane, got shape {:?}",
            t.shape()
        )));
    }
    let mut img = GrayImage::new(w as u32, h as u32);
    for (i, &v) in t.data().iter().enumerate() {
        img.put_pixel((i % w) as u32, (i / w) as u32, Luma([quantize(v)]));
    }
    create_parent(path)?;
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Write an RGB image from three planes with values in `[0, 1]`.
pub fn write_rgb(planes: [&[f32]; 3], h: usize, w: usize, path: &Path) -> Result<()> {
    if planes.iter().any(|p| p.len() != h * w) {
        return Err(Error::usage("write_rgb plane size mismatch"));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for i in 0..h * w {
        let px = Rgb([quantize(planes[0][i]), quantize(planes[1][i]), quantize(planes[2][i])]);
        img.put_pixel((i % w) as u32, (i / w) as u32, px);
    }
    create_parent(path)?;
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

pub fn encode_raw(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = plane_dims(t)?;
    let mut bytes = Vec::with_capacity(16 + 4 * t.numel());
    bytes.extend_from_slice(RAW_MAGIC);
    for v in [RAW_DTYPE_F32, h as u32, w as u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for &v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

/// Decode a raw planar file into `[1, P, H, W]`.
pub fn decode_raw(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 16 || &bytes[..4] != RAW_MAGIC {
        return Err(Error::integrity("raw float file: bad magic or short header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (dtype, h, w) = (word(4) as u32, word(8), word(12));
    if dtype != RAW_DTYPE_F32 {
        return Err(Error::integrity(format!("raw float file: unsupported dtype code {dtype}")));
    }
    let body = &bytes[16..];
    let plane = 4 * h * w;
    if plane == 0 || body.len() % plane != 0 || body.is_empty() {
        return Err(Error::integrity(format!(
            "raw float file: {} payload bytes do not form {h}x{w} planes",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(vec![1, body.len() / plane, h, w], data)
}

pub fn write_raw(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let bytes = encode_raw(t)?;
    create_parent(path)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_raw(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_levels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("levels.png");
        let data: Vec<f32> = (0..256).map(|v| v as f32 / 255.0).collect();
        let t = Tensor::new(vec![1, 16, 16], data).unwrap();
        write_image(&t, &path).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.shape(), &[1, 16, 16]);
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn constant_and_zero_images() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        write_image(&Tensor::full(vec![1, 5, 7], 0.5f32), &p).unwrap();
        assert!(read_image(&p).unwrap().data().iter().all(|v| (v - 0.5).abs() <= 1.0 / 255.0));
        write_image(&Tensor::zeros(vec![1, 5, 7]), &p).unwrap();
        assert!(read_image(&p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn malformed_image_is_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not a png").unwrap();
        assert!(matches!(read_image(&p), Err(Error::Ingestion(_))));
        assert!(matches!(read_image(&dir.path().join("missing.png")), Err(Error::Ingestion(_))));
    }

    #[test]
    fn raw_header_layout() {
        let t = Tensor::new(vec![1, 2, 2, 3], (0..12).map(|v| v as f32).collect()).unwrap();
        let bytes = encode_raw(&t).unwrap();
        assert_eq!(bytes.len(), 16 + 48);
        assert_eq!(&bytes[..4], b"SSUF");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(decode_raw(&bytes).unwrap(), t);
        assert!(matches!(decode_raw(&bytes[..20]), Err(Error::Integrity(_))));
    }
}
