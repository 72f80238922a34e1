//! Loss values against hand computation and scalar-loop oracles.

use forgeloc::loss::{bce, combined_loss, dice, focal, DiceReduction, FocalVariant, LossConfig};
use forgeloc::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t4(v: [f64; 4]) -> Tensor<f64> {
    Tensor::new(&[1, 1, 2, 2], v.to_vec()).unwrap()
}

/// class prob 0.8 (forged), map [[0.9, 0.2], [0.6, 0.1]], mask [[1, 0], [1, 0]].
fn fixture(cfg: &LossConfig) -> (f64, [f64; 3]) {
    let mut g = Graph::new();
    let prob = g.leaf(Tensor::new(&[1, 1, 1, 1], vec![0.8]).unwrap(), true);
    let map = g.leaf(t4([0.9, 0.2, 0.6, 0.1]), true);
    let label = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
    let mask = t4([1.0, 0.0, 1.0, 0.0]);
    let (total, parts) = combined_loss(&mut g, prob, &label, map, &mask, cfg).unwrap();
    (g.value(total).item(), [parts.cls, parts.dice, parts.focal])
}

#[test]
fn combined_loss_matches_hand_computation() {
    let cfg = LossConfig::default();
    assert_eq!((cfg.w_cls, cfg.w_dice, cfg.w_focal, cfg.gamma, cfg.eps), (1.0, 1.10, 1.15, 2.0, 1e-7));
    // −ln 0.8
    let cls = 0.2231435513142097;
    // 2·(0.9 + 0.6) = 3.0 over ΣP + ΣG = 1.8 + 2 = 3.8
    let dsc = -((3.0f64 + 1e-7) / (3.8 + 1e-7)).ln();
    // p_t = 0.9, 0.8, 0.6, 0.9, all above 0.5: weights (2(1 − p_t))².
    let fl = (-0.04 * 0.9f64.ln() - 0.16 * 0.8f64.ln() - 0.64 * 0.6f64.ln() - 0.04 * 0.9f64.ln()) / 4.0;
    let (total, [c, d, f]) = fixture(&cfg);
    assert!((c - cls).abs() < 1e-9);
    assert!((d - dsc).abs() < 1e-9);
    assert!((d - 0.23638877104668668).abs() < 1e-9);
    assert!((f - fl).abs() < 1e-9);
    assert!((total - 0.5898510094590911).abs() < 1e-9);
    assert!((total - (cls + 1.10 * dsc + 1.15 * fl)).abs() < 1e-9);
}

#[test]
fn plain_focal_and_localization_only_variants() {
    let plain = LossConfig {
        focal: FocalVariant::Plain,
        ..LossConfig::default()
    };
    let (_, [_, _, f]) = fixture(&plain);
    assert!((f - 0.023191263042070864).abs() < 1e-9);
    let no_cls = LossConfig {
        w_cls: 0.0,
        ..LossConfig::default()
    };
    let (total, [_, d, f]) = fixture(&no_cls);
    assert!((total - (1.10 * d + 1.15 * f)).abs() < 1e-12);
}

#[test]
fn dice_examples() {
    assert!((dice(&[0.0f64; 100], &[1.0f64; 100], 1e-7) - 20.723).abs() < 1e-3);
    assert_eq!(dice(&[0.0f64; 9], &[0.0f64; 9], 1e-7), 0.0);
    let g: Vec<f64> = (0..16).map(|i| (i % 3 == 0) as u8 as f64).collect();
    assert!(dice(&g, &g, 1e-7).abs() < 1e-7);
}

#[test]
fn batch_and_per_image_dice_agree_on_one_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = Tensor::<f64>::uniform(&[1, 1, 4, 4], 0.0, 1.0, &mut rng);
    let m = Tensor::from_fn(&[1, 1, 4, 4], |i| (i % 2) as f64);
    let value = |r| {
        let mut g = Graph::new();
        let v = g.constant(p.clone());
        let d = forgeloc::loss::dice_loss(&mut g, v, &m, 1e-7, r).unwrap();
        g.value(d).item()
    };
    assert_eq!(value(DiceReduction::PerImage), value(DiceReduction::Batch));
}

#[test]
fn bce_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let p = Tensor::<f64>::uniform(&[3, 1, 4, 4], 0.01, 0.99, &mut rng);
        let y = Tensor::from_fn(&[3, 1, 4, 4], |_| rng.random_bool(0.5) as u8 as f64);
        let mut acc = 0.0;
        for i in 0..p.numel() {
            let (a, b) = (p.data()[i], y.data()[i]);
            acc += -(b * a.ln() + (1.0 - b) * (1.0 - a).ln());
        }
        assert!((bce(&p, &y, 1e-7).unwrap() - acc / 48.0).abs() < 1e-9);
    }
}

fn one(p: f64, y: f64) -> (Tensor<f64>, Tensor<f64>) {
    (Tensor::new(&[1], vec![p]).unwrap(), Tensor::new(&[1], vec![y]).unwrap())
}

proptest! {
    #[test]
    fn dice_is_symmetric_under_joint_permutation(
        data in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..64),
        seed in any::<u64>(),
    ) {
        let p: Vec<f64> = data.iter().map(|d| d.0).collect();
        let g: Vec<f64> = data.iter().map(|d| d.1 as u8 as f64).collect();
        let mut idx: Vec<usize> = (0..p.len()).collect();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pp: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        let gp: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
        prop_assert!((dice(&p, &g, 1e-7) - dice(&pp, &gp, 1e-7)).abs() < 1e-12);
    }

    #[test]
    fn focal_decreases_as_pt_increases(
        a in 0.001f64..0.999,
        b in 0.001f64..0.999,
        positive in any::<bool>(),
        reduced in any::<bool>(),
    ) {
        let cfg = LossConfig {
            focal: if reduced { FocalVariant::Reduced } else { FocalVariant::Plain },
            ..LossConfig::default()
        };
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let y = positive as u8 as f64;
        // p_t = p for positives, 1 − p for negatives.
        let p_of = |pt: f64| if positive { pt } else { 1.0 - pt };
        let (p1, t) = one(p_of(lo), y);
        let (p2, _) = one(p_of(hi), y);
        let f_lo = focal(&p1, &t, &cfg).unwrap();
        let f_hi = focal(&p2, &t, &cfg).unwrap();
        prop_assert!(f_hi <= f_lo + 1e-15);
        prop_assert!(f_hi >= 0.0 && f_hi.is_finite());
    }
}
