//! The lossy half of a baseline JPEG codec: colour transform, 8×8 DCT,
//! quantization and the inverse path. Entropy coding is omitted since it is
//! lossless and does not affect the decoded pixels.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Annex K luminance table, row-major.
pub const STD_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Annex K chrominance table, row-major.
pub const STD_CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Chroma subsampling. Only full-resolution chroma is implemented.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Subsampling {
    #[default]
    None444,
}

/// Quantization tables for one quality setting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JpegPlan {
    pub quality: u32,
    pub luma: [u16; 64],
    pub chroma: [u16; 64],
    pub subsampling: Subsampling,
}

/// IJG quality scaling of a base table entry.
pub fn scale_entry(base: u16, quality: u32) -> u16 {
    let scale = if quality < 50 {
        5000 / quality
    } else {
        200 - 2 * quality
    };
    ((base as u32 * scale + 50) / 100).clamp(1, 255) as u16
}

impl JpegPlan {
    pub fn new(quality: u32) -> Result<Self> {
        if !(1..=100).contains(&quality) {
            return Err(Error::InvalidQuality(quality));
        }
        Ok(Self {
            quality,
            luma: STD_LUMA.map(|b| scale_entry(b, quality)),
            chroma: STD_CHROMA.map(|b| scale_entry(b, quality)),
            subsampling: Subsampling::None444,
        })
    }
}

/// Orthonormal DCT-II basis: `basis[u][x] = c(u)/2 · cos((2x+1)uπ/16)`.
fn basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (u, row) in b.iter_mut().enumerate() {
            let cu = if u == 0 { (0.5f64).sqrt() } else { 1.0 };
            for (x, v) in row.iter_mut().enumerate() {
                *v = 0.5
                    * cu
                    * (((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos();
            }
        }
        b
    })
}

/// Forward 2-D DCT of an 8×8 block in place.
pub fn fdct(block: &mut [f64; 64]) {
    let b = basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| b[u][x] * block[y * 8 + x]).sum();
        }
    }
    for v in 0..8 {
        for u in 0..8 {
            block[v * 8 + u] = (0..8).map(|y| b[v][y] * tmp[y * 8 + u]).sum();
        }
    }
}

/// Inverse 2-D DCT of an 8×8 block in place.
pub fn idct(block: &mut [f64; 64]) {
    let b = basis();
    let mut tmp = [0.0; 64];
    for v in 0..8 {
        for x in 0..8 {
            tmp[v * 8 + x] = (0..8).map(|u| b[u][x] * block[v * 8 + u]).sum();
        }
    }
    for y in 0..8 {
        for x in 0..8 {
            block[y * 8 + x] = (0..8).map(|v| b[v][y] * tmp[v * 8 + x]).sum();
        }
    }
}

fn quantize_block(block: &mut [f64; 64], table: &[u16; 64]) {
    for (c, &q) in block.iter_mut().zip(table) {
        let q = q as f64;
        *c = (*c / q).round() * q;
    }
}

/// Encodes then decodes a 3×H×W RGB image with values in `[0, 1]`.
///
/// Pixels are first quantized to 8 bits, as an encoder would receive them.
/// Partial edge blocks are padded by edge replication. The output is
/// rounded back to 8-bit levels and rescaled to `[0, 1]`.
pub fn jpeg_roundtrip(image: &Tensor<f32>, quality: u32) -> Result<Tensor<f32>> {
    let plan = JpegPlan::new(quality)?;
    roundtrip_with_plan(image, &plan)
}

pub fn roundtrip_with_plan(image: &Tensor<f32>, plan: &JpegPlan) -> Result<Tensor<f32>> {
    let (h, w) = match image.shape() {
        &[3, h, w] => (h, w),
        s => {
            return Err(Error::InvalidShape {
                op: "jpeg_roundtrip",
                shape: s.to_vec(),
                reason: "expected a 3×H×W RGB image".into(),
            })
        }
    };
    if h < 8 || w < 8 {
        return Err(Error::InvalidShape {
            op: "jpeg_roundtrip",
            shape: image.shape().to_vec(),
            reason: "height and width must be at least 8".into(),
        });
    }
    let plane = h * w;
    let px = image.data();
    let level = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as f64;

    let mut ycc = vec![[0.0f64; 3]; plane];
    for (i, out) in ycc.iter_mut().enumerate() {
        let (r, g, b) = (level(px[i]), level(px[plane + i]), level(px[2 * plane + i]));
        *out = [
            0.299 * r + 0.587 * g + 0.114 * b,
            -0.168_736 * r - 0.331_264 * g + 0.5 * b + 128.0,
            0.5 * r - 0.418_688 * g - 0.081_312 * b + 128.0,
        ];
    }

    let mut decoded = vec![[0.0f64; 3]; plane];
    let mut block = [0.0f64; 64];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            for ch in 0..3 {
                for y in 0..8 {
                    let sy = (by + y).min(h - 1);
                    for x in 0..8 {
                        let sx = (bx + x).min(w - 1);
                        block[y * 8 + x] = ycc[sy * w + sx][ch] - 128.0;
                    }
                }
                fdct(&mut block);
                quantize_block(&mut block, if ch == 0 { &plan.luma } else { &plan.chroma });
                idct(&mut block);
                for y in 0..8.min(h - by) {
                    for x in 0..8.min(w - bx) {
                        decoded[(by + y) * w + bx + x][ch] = block[y * 8 + x] + 128.0;
                    }
                }
            }
        }
    }

    let mut out = vec![0.0f32; 3 * plane];
    let to_unit = |v: f64| (v.round().clamp(0.0, 255.0) as u8) as f32 / 255.0;
    for (i, &[y, cb, cr]) in decoded.iter().enumerate() {
        out[i] = to_unit(y + 1.402 * (cr - 128.0));
        out[plane + i] = to_unit(y - 0.344_136 * (cb - 128.0) - 0.714_136 * (cr - 128.0));
        out[2 * plane + i] = to_unit(y + 1.772 * (cb - 128.0));
    }
    Tensor::new(image.shape(), out)
}

/// Absolute difference between an image and its JPEG round trip.
pub fn ela_residual(image: &Tensor<f32>, quality: u32) -> Result<Tensor<f32>> {
    let rt = jpeg_roundtrip(image, quality)?;
    let data = image
        .data()
        .iter()
        .zip(rt.data())
        .map(|(&a, &b)| (a - b).abs())
        .collect();
    Tensor::new(image.shape(), data)
}
