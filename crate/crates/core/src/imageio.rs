//! Reading and writing images, masks and probability heatmaps.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_u8(v: f32) -> u8 {
    // Round half up, as heatmaps are documented.
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Loads an 8-bit PNG or PPM image as a 3×H×W tensor in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Writes a 3×H×W tensor as an 8-bit RGB PNG.
pub fn write_rgb_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (h, w) = match image.shape() {
        &[3, h, w] => (h, w),
        s => {
            return Err(Error::InvalidShape {
                op: "write_rgb_png",
                shape: s.to_vec(),
                reason: "expected 3×H×W".into(),
            })
        }
    };
    let plane = h * w;
    let d = image.data();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_u8(d[i]), to_u8(d[plane + i]), to_u8(d[2 * plane + i])])
    });
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn gray_bytes(map: &Tensor<f32>) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = match map.shape() {
        &[1, h, w] | &[1, 1, h, w] => (h, w),
        &[h, w] => (h, w),
        s => {
            return Err(Error::InvalidShape {
                op: "write_gray",
                shape: s.to_vec(),
                reason: "expected a single-channel map".into(),
            })
        }
    };
    Ok((h, w, map.data().iter().map(|&v| to_u8(v)).collect()))
}

/// Writes a single-channel map in `[0, 1]` as 8-bit grayscale, PNG or
/// binary PGM depending on the extension.
pub fn write_gray(path: &Path, map: &Tensor<f32>) -> Result<()> {
    let (h, w, bytes) = gray_bytes(map)?;
    let is_pgm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        out.extend_from_slice(&bytes);
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    } else {
        image::GrayImage::from_raw(w as u32, h as u32, bytes)
            .expect("buffer matches dimensions")
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

/// Reads a grayscale mask (PGM or PNG) as a 1×H×W tensor of 0/1.
pub fn read_mask(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[1, h, w], data)
}
