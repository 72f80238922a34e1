//! Procedural host and donor images.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::Tensor;

use super::quantize;

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Value noise: random lattice values every `cell` pixels, smoothly
/// interpolated.
fn value_noise(rng: &mut impl Rng, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / cell as f64;
        let (iy, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let (ix, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
            let at = |r: usize, c: usize| lattice[r * gw + c];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Procedural 3×H×W texture: base colour, gradient, multi-octave value
/// noise, a few random shapes and per-pixel sensor noise, quantized to
/// 8-bit levels.
pub fn gen_base(seed: u64, height: usize, width: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height, width);
    let plane = h * w;
    let mut img = vec![0.0f64; 3 * plane];

    let octaves = [(16usize, 0.22), (8, 0.10), (4, 0.05)];
    let mut lum = vec![0.0; plane];
    for &(cell, amp) in &octaves {
        let n = value_noise(&mut rng, h, w, cell.min(h.max(w)));
        lum.iter_mut().zip(n).for_each(|(l, v)| *l += amp * v);
    }
    for c in 0..3 {
        let base = rng.random_range(0.25..0.75);
        let (gy, gx) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
        let tint = value_noise(&mut rng, h, w, 8.min(h.max(w)));
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                img[c * plane + i] = base
                    + gy * (y as f64 / h as f64 - 0.5)
                    + gx * (x as f64 / w as f64 - 0.5)
                    + lum[i]
                    + 0.06 * tint[i];
            }
        }
    }

    let shapes = rng.random_range(2..6);
    for _ in 0..shapes {
        let colour: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let alpha = rng.random_range(0.5..1.0);
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let (ry, rx) = (
            rng.random_range(0.05..0.3) * h as f64,
            rng.random_range(0.05..0.3) * w as f64,
        );
        let ellipse = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let hit = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if hit {
                    let i = y * w + x;
                    for (c, &col) in colour.iter().enumerate() {
                        let v = &mut img[c * plane + i];
                        *v = (1.0 - alpha) * *v + alpha * col;
                    }
                }
            }
        }
    }

    let sigma = rng.random_range(0.002..0.012);
    let noise = Normal::new(0.0, sigma).expect("positive sigma");
    for v in img.iter_mut() {
        *v += noise.sample(&mut rng);
    }
    let mut out = Tensor::new(&[3, h, w], img.into_iter().map(|v| v as f32).collect())
        .expect("static shape");
    quantize(&mut out);
    out
}

/// Images under a directory, used instead of procedural textures.
pub struct ImageSource {
    files: Vec<PathBuf>,
}

impl ImageSource {
    pub fn open(dir: &Path) -> Result<Self> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension().and_then(|e| e.to_str()).is_some_and(|e| {
                    matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "jpg" | "jpeg")
                })
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::invalid(format!("no images found in {}", dir.display())));
        }
        Ok(Self { files })
    }

    /// Seeded crop (or nearest-neighbour resize when too small) of one of
    /// the images.
    pub fn sample(&self, seed: u64, height: usize, width: usize) -> Result<Tensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let path = &self.files[rng.random_range(0..self.files.len())];
        let img = imageio::read_rgb(path)?;
        let (ih, iw) = (img.shape()[1], img.shape()[2]);
        let plane = ih * iw;
        let (oy, ox, sy, sx) = if ih >= height && iw >= width {
            (rng.random_range(0..=ih - height), rng.random_range(0..=iw - width), 1.0, 1.0)
        } else {
            (0, 0, ih as f64 / height as f64, iw as f64 / width as f64)
        };
        let d = img.data();
        Ok(Tensor::from_fn(&[3, height, width], |i| {
            let c = i / (height * width);
            let y = (i / width) % height;
            let x = i % width;
            let ry = oy + ((y as f64 * sy) as usize).min(ih - 1);
            let rx = ox + ((x as f64 * sx) as usize).min(iw - 1);
            d[c * plane + ry * iw + rx]
        }))
    }
}
