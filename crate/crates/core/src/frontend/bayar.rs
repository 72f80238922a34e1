//! Constrained convolution: each filter predicts the centre pixel from its
//! neighbours, so the response is a prediction residual.

use rand::Rng;

use crate::tensor::{Float, Tensor};

/// Projects every `k × k` slice of an `O × I × k × k` weight so the centre
/// tap is −1 and the remaining taps sum to 1.
///
/// A slice whose off-centre taps sum to (almost) zero cannot be rescaled and
/// is reset to the uniform predictor `1 / (k² − 1)`.
pub fn project<T: Float>(w: &mut Tensor<T>) {
    let k = w.shape()[2];
    debug_assert!(k % 2 == 1 && w.shape()[3] == k);
    let centre = (k / 2) * k + k / 2;
    let uniform = T::one() / T::of((k * k - 1) as f64);
    for slice in w.data_mut().chunks_mut(k * k) {
        slice[centre] = T::zero();
        let sum: T = slice.iter().copied().sum();
        if sum.abs() < T::of(1e-8) || !sum.is_finite() {
            slice.iter_mut().for_each(|v| *v = uniform);
        } else {
            slice.iter_mut().for_each(|v| *v /= sum);
        }
        slice[centre] = -T::one();
    }
}

/// Largest deviation from the constraint over all slices:
/// `max(|centre + 1|, |Σ off-centre − 1|)`.
pub fn constraint_violation<T: Float>(w: &Tensor<T>) -> f64 {
    let k = w.shape()[2];
    let centre = (k / 2) * k + k / 2;
    w.data()
        .chunks(k * k)
        .map(|s| {
            let off: f64 = s
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != centre)
                .map(|(_, v)| v.f64())
                .sum();
            (s[centre].f64() + 1.0).abs().max((off - 1.0).abs())
        })
        .fold(0.0, f64::max)
}

/// Random projected initial weights.
pub fn init<T: Float>(cout: usize, cin: usize, k: usize, rng: &mut impl Rng) -> Tensor<T> {
    let mut w = Tensor::uniform(&[cout, cin, k, k], 0.0, 1.0, rng);
    project(&mut w);
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projection_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut w = Tensor::<f64>::randn(&[3, 3, 5, 5], 1.0, &mut rng);
            project(&mut w);
            assert!(constraint_violation(&w) < 1e-6);
            let once = w.clone();
            project(&mut w);
            assert!(w.max_abs_diff(&once) < 1e-12);
        }
    }

    #[test]
    fn zero_off_centre_resets_uniform() {
        let mut w = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
        w.data_mut()[12] = 3.0;
        project(&mut w);
        assert_eq!(w.data()[12], -1.0);
        assert!(w.data().iter().enumerate().all(|(i, &v)| i == 12 || v == 1.0 / 24.0));
    }

    #[test]
    fn constant_image_gives_exact_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f32>::full(&[1, 3, 16, 16], 0.5));
        let w = g.constant(init::<f32>(3, 3, 5, &mut rng));
        let y = g.residual_conv2d(x, w).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_form_matches_plain_convolution_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::randn(&[1, 3, 12, 12], 1.0, &mut rng));
        let w = g.constant(init::<f64>(3, 3, 5, &mut rng));
        let r = g.residual_conv2d(x, w).unwrap();
        let p = g.conv2d(x, w, None, 1, 2).unwrap();
        let (r, p) = (g.value(r), g.value(p));
        for c in 0..3 {
            for y in 2..10 {
                for xx in 2..10 {
                    let i = c * 144 + y * 12 + xx;
                    assert!((r.data()[i] - p.data()[i]).abs() < 1e-12);
                }
            }
        }
    }
}
