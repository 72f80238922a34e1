//! Post-processing distortions for robustness sweeps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::jpeg::jpeg_roundtrip;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "param", rename_all = "snake_case")]
pub enum Distortion {
    /// Gaussian blur with an odd kernel size k ≥ 3.
    GaussianBlur(usize),
    /// JPEG round trip at quality q.
    Jpeg(u32),
    /// Additive Gaussian noise with standard deviation σ, then clamped.
    GaussianNoise(f64),
}

impl Distortion {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Distortion::GaussianBlur(k) if k < 3 || k % 2 == 0 => {
                Err(Error::invalid(format!("blur kernel must be odd and ≥ 3, got {k}")))
            }
            Distortion::Jpeg(q) if !(1..=100).contains(&q) => Err(Error::InvalidQuality(q)),
            Distortion::GaussianNoise(s) if !(s >= 0.0 && s.is_finite()) => {
                Err(Error::invalid(format!("noise sigma must be ≥ 0, got {s}")))
            }
            _ => Ok(()),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Distortion::GaussianBlur(_) => "gaussian_blur",
            Distortion::Jpeg(_) => "jpeg",
            Distortion::GaussianNoise(_) => "gaussian_noise",
        }
    }

    pub fn param(&self) -> String {
        match *self {
            Distortion::GaussianBlur(k) => k.to_string(),
            Distortion::Jpeg(q) => q.to_string(),
            Distortion::GaussianNoise(s) => s.to_string(),
        }
    }

    /// The grid swept by the robustness harness.
    pub fn default_grid() -> Vec<Distortion> {
        let mut g: Vec<Distortion> = [3, 5, 7].map(Distortion::GaussianBlur).to_vec();
        g.extend([95, 85, 75].map(Distortion::Jpeg));
        g.extend([0.01, 0.03, 0.05].map(Distortion::GaussianNoise));
        g
    }
}

/// Standard deviation used for a blur kernel of size `k`.
pub fn blur_sigma(k: usize) -> f64 {
    0.3 * ((k as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

fn gaussian_kernel(k: usize) -> Vec<f64> {
    let sigma = blur_sigma(k);
    let r = (k / 2) as f64;
    let raw: Vec<f64> = (0..k)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur of a C×H×W image with replicated borders.
pub fn gaussian_blur(image: &Tensor<f32>, k: usize) -> Result<Tensor<f32>> {
    Distortion::GaussianBlur(k).validate()?;
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        s => {
            return Err(Error::InvalidShape {
                op: "gaussian_blur",
                shape: s.to_vec(),
                reason: "expected C×H×W".into(),
            })
        }
    };
    let kern = gaussian_kernel(k);
    let r = (k / 2) as isize;
    let mut tmp = vec![0.0f64; c * h * w];
    let src = image.data();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &kv) in kern.iter().enumerate() {
                    let sx = (x as isize + t as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += kv * src[(ch * h + y) * w + sx] as f64;
                }
                tmp[(ch * h + y) * w + x] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &kv) in kern.iter().enumerate() {
                    let sy = (y as isize + t as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[(ch * h + sy) * w + x];
                }
                out[(ch * h + y) * w + x] = acc as f32;
            }
        }
    }
    Tensor::new(image.shape(), out)
}

/// Applies a distortion to a 3×H×W image. `seed` drives the noise.
pub fn distort(image: &Tensor<f32>, spec: &Distortion, seed: u64) -> Result<Tensor<f32>> {
    spec.validate()?;
    match *spec {
        Distortion::GaussianBlur(k) => gaussian_blur(image, k),
        Distortion::Jpeg(q) => jpeg_roundtrip(image, q),
        Distortion::GaussianNoise(sigma) => {
            if sigma == 0.0 {
                return Ok(image.clone());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = Normal::new(0.0, sigma).expect("valid sigma");
            let data = image
                .data()
                .iter()
                .map(|&v| (v as f64 + n.sample(&mut rng)).clamp(0.0, 1.0) as f32)
                .collect();
            Tensor::new(image.shape(), data)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::texture::gen_base;

    #[test]
    fn blur_keeps_constants() {
        let img = Tensor::full(&[3, 9, 11], 0.4f32);
        for k in [3, 5, 7] {
            let out = gaussian_blur(&img, k).unwrap();
            assert!(out.max_abs_diff(&img) < 1e-6);
        }
        assert!((blur_sigma(3) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_is_identity() {
        let img = gen_base(1, 16, 16);
        assert_eq!(distort(&img, &Distortion::GaussianNoise(0.0), 3).unwrap().data(), img.data());
    }

    #[test]
    fn jpeg_100_is_nearly_lossless() {
        let img = gen_base(2, 32, 32);
        let out = distort(&img, &Distortion::Jpeg(100), 0).unwrap();
        assert!(out.max_abs_diff(&img) <= 2.0 / 255.0 + 1e-6);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(Distortion::GaussianBlur(4).validate().is_err());
        assert!(Distortion::GaussianBlur(1).validate().is_err());
        assert!(Distortion::Jpeg(0).validate().is_err());
        assert!(Distortion::GaussianNoise(-0.1).validate().is_err());
        assert_eq!(Distortion::default_grid().len(), 9);
    }
}
