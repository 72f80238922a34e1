//! Training-time augmentation. Geometric transforms act on image and mask
//! together; blur touches the image only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

use super::distort::gaussian_blur;
use super::Sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip: f64,
    pub vflip: f64,
    /// Rotation by a random non-zero multiple of 90° (180° only for
    /// non-square images).
    pub rotate: f64,
    pub blur: f64,
    pub blur_kernel: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip: 0.5,
            vflip: 0.5,
            rotate: 0.5,
            blur: 0.3,
            blur_kernel: 3,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            hflip: 0.0,
            vflip: 0.0,
            rotate: 0.0,
            blur: 0.0,
            blur_kernel: 3,
        }
    }
}

fn remap(t: &Tensor<f32>, out_h: usize, out_w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Tensor<f32> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let d = t.data();
    Tensor::from_fn(&[c, out_h, out_w], |i| {
        let ch = i / (out_h * out_w);
        let (y, x) = src((i / out_w) % out_h, i % out_w);
        d[(ch * h + y) * w + x]
    })
}

pub fn hflip(t: &Tensor<f32>) -> Tensor<f32> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    remap(t, h, w, |y, x| (y, w - 1 - x))
}

pub fn vflip(t: &Tensor<f32>) -> Tensor<f32> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    remap(t, h, w, |y, x| (h - 1 - y, x))
}

/// Counter-clockwise rotation by `k · 90°`.
pub fn rot90(t: &Tensor<f32>, k: usize) -> Tensor<f32> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    match k % 4 {
        0 => t.clone(),
        1 => remap(t, w, h, |y, x| (x, w - 1 - y)),
        2 => remap(t, h, w, |y, x| (h - 1 - y, w - 1 - x)),
        _ => remap(t, w, h, |y, x| (h - 1 - x, y)),
    }
}

pub fn augment(sample: &Sample, cfg: &AugmentConfig, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();
    if rng.random_bool(cfg.hflip) {
        image = hflip(&image);
        mask = hflip(&mask);
    }
    if rng.random_bool(cfg.vflip) {
        image = vflip(&image);
        mask = vflip(&mask);
    }
    if rng.random_bool(cfg.rotate) {
        let k = if sample.height() == sample.width() {
            rng.random_range(1..4)
        } else {
            2
        };
        image = rot90(&image, k);
        mask = rot90(&mask, k);
    }
    if rng.random_bool(cfg.blur) {
        image = gaussian_blur(&image, cfg.blur_kernel).expect("validated kernel");
    }
    Sample {
        image,
        mask,
        label: sample.label,
        provenance: sample.provenance.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::forge::{generate, ForgeConfig};
    use crate::synth::Operation;

    #[test]
    fn flips_are_involutions() {
        let s = generate(Operation::Splice, 4, 16, 24, &ForgeConfig::default()).unwrap();
        assert_eq!(hflip(&hflip(&s.image)).data(), s.image.data());
        assert_eq!(vflip(&vflip(&s.image)).data(), s.image.data());
        let r = rot90(&s.image, 1);
        assert_eq!(r.shape(), &[3, 24, 16]);
        assert_eq!(rot90(&r, 3).data(), s.image.data());
    }

    #[test]
    fn rotation_direction() {
        // [[1, 2], [3, 4]] rotated counter-clockwise is [[2, 4], [1, 3]].
        let t = Tensor::new(&[1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(rot90(&t, 1).data(), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn zero_probability_is_identity() {
        let s = generate(Operation::Inpaint, 1, 32, 32, &ForgeConfig::default()).unwrap();
        let a = augment(&s, &AugmentConfig::none(), 9);
        assert_eq!(a.image.data(), s.image.data());
        assert_eq!(a.mask.data(), s.mask.data());
    }

    #[test]
    fn mask_registration_and_count() {
        let s = generate(Operation::Splice, 2, 32, 32, &ForgeConfig::default()).unwrap();
        let cfg = AugmentConfig {
            blur: 0.0,
            ..AugmentConfig::default()
        };
        for seed in 0..20 {
            let a = augment(&s, &cfg, seed);
            assert_eq!(a.forged_pixels(), s.forged_pixels());
            // The same geometric transform applied to image and mask keeps
            // the masked pixels pointing at the same colours.
            let masked = |x: &Sample| {
                let mut v: Vec<u32> = (0..1024)
                    .filter(|&i| x.mask.data()[i] > 0.5)
                    .map(|i| (x.image.data()[i] * 255.0).round() as u32)
                    .collect();
                v.sort();
                v
            };
            assert_eq!(masked(&a), masked(&s));
        }
    }
}
