//! Synthetic data generation: example cases and registration properties.

use std::collections::BTreeMap;
use std::path::Path;

use forgeloc::frontend::jpeg::ela_residual;
use forgeloc::synth::augment::{augment, AugmentConfig};
use forgeloc::synth::dataset::{dataset_build, plan_split, DatasetSpec};
use forgeloc::synth::forge::{gen_inpaint, gen_splice};
use forgeloc::synth::texture::gen_base;
use forgeloc::synth::{Label, Operation, Provenance, Region, Sample};
use forgeloc::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn different_texture_seeds_differ_by_more_than_one_percent() {
    for s in 0..100u64 {
        let a = gen_base(2 * s, 64, 64);
        let b = gen_base(2 * s + 1, 64, 64);
        let mad = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>()
            / a.numel() as f64;
        assert!(mad > 0.01, "seeds {} and {}: {mad}", 2 * s, 2 * s + 1);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(gen_base(5, 48, 40).data() == gen_base(5, 48, 40).data());
}

fn region_means(residual: &Tensor<f32>, mask: &[bool]) -> (f64, f64) {
    let plane = mask.len();
    let (mut sums, mut counts) = ([0.0f64; 2], [0usize; 2]);
    for (i, &v) in residual.data().iter().enumerate() {
        let k = mask[i % plane] as usize;
        sums[k] += v as f64;
        counts[k] += 1;
    }
    (sums[1] / counts[1] as f64, sums[0] / counts[0] as f64)
}

#[test]
fn splice_from_low_quality_donor_raises_ela_inside_the_region() {
    let seeds = 40;
    let (mut wins, mut ratio) = (0, 0.0);
    for s in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let host = gen_base(rng.random(), 64, 64);
        let donor = gen_base(rng.random(), 64, 64);
        let region = Region::random(&mut rng, 64, 64, 0.3, 0.45);
        let offset = (rng.random_range(1..8) + 8 * rng.random_range(0..3), rng.random_range(1..8));
        let (img, mask) = gen_splice(&host, &donor, &region, offset, Some(95), Some(60)).unwrap();
        let mask: Vec<bool> = mask.data().iter().map(|&m| m > 0.5).collect();
        let (inside, outside) = region_means(&ela_residual(&img, 90).unwrap(), &mask);
        wins += (inside > outside) as usize;
        ratio += inside / outside / seeds as f64;
    }
    assert!(ratio > 1.0, "mean inside/outside ratio {ratio}");
    assert!(wins * 4 >= seeds as usize * 3, "{wins}/{seeds}");
}

#[test]
fn inpainting_never_copies_the_original_region() {
    for s in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let img = gen_base(s, 48, 48);
        let region = Region::random(&mut rng, 48, 48, 0.2, 0.45);
        let (out, mask) = gen_inpaint(&img, &region).unwrap();
        let plane = 48 * 48;
        let changed = (0..out.numel())
            .filter(|&i| mask.data()[i % plane] > 0.5)
            .any(|i| out.data()[i] != img.data()[i]);
        assert!(changed, "seed {s}");
    }
}

#[test]
fn split_counts_follow_the_spec() {
    let spec = DatasetSpec::default();
    for (split, n) in [(0, 200), (1, 50), (2, 50)] {
        let ops = plan_split(&spec, split);
        assert_eq!(ops.len(), n);
        let authentic = ops.iter().filter(|&&o| o == Operation::Authentic).count();
        assert!((authentic as f64 - n as f64 / 2.0).abs() <= 1.0);
    }
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn same_master_seed_writes_identical_dataset_trees() {
    let spec = DatasetSpec {
        train: 8,
        val: 4,
        test: 4,
        height: 32,
        width: 32,
        seed: 11,
        ..DatasetSpec::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    dataset_build(&spec, a.path()).unwrap();
    dataset_build(&spec, b.path()).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.len() > 3 * 2 * 4);
    assert_eq!(ta, tb);
}

/// A sample whose first image channel is a copy of its mask.
fn marked_sample(seed: u64, h: usize, w: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let region = Region::random(&mut rng, h, w, 0.2, 0.45);
    let mask: Vec<f32> = region.rasterize(h, w).iter().map(|&m| m as u8 as f32).collect();
    let mut image = gen_base(seed, h, w);
    image.data_mut()[..h * w].copy_from_slice(&mask);
    Sample {
        image,
        mask: Tensor::new(&[1, h, w], mask).unwrap(),
        label: Label::Forged,
        provenance: Provenance {
            operation: Operation::Splice,
            seed,
            donor_seed: None,
            region: Some(region),
            source_offset: None,
            host_quality: None,
            donor_quality: None,
        },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn geometric_augmentation_keeps_mask_registered(
        seed in any::<u64>(),
        aug in any::<u64>(),
        dims in prop::sample::select(vec![(16usize, 16usize), (16, 24), (24, 16)]),
    ) {
        let s = marked_sample(seed, dims.0, dims.1);
        let cfg = AugmentConfig { blur: 0.0, ..AugmentConfig::default() };
        let out = augment(&s, &cfg, aug);
        let plane = out.height() * out.width();
        prop_assert_eq!(&out.image.data()[..plane], out.mask.data());
        prop_assert_eq!(out.forged_pixels(), s.forged_pixels());
        prop_assert!(out.is_consistent());
    }
}
