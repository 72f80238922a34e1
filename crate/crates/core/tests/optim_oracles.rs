//! Optimizer and schedule behaviour against scalar reference loops.

use forgeloc::nn::ParamStore;
use forgeloc::tensor::Tensor;
use forgeloc::train::{Adam, EarlyStopping, Plateau};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Textbook Adam with decoupled decay on one scalar.
struct ScalarAdam {
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    fn step(&mut self, w: f64, g: f64, lr: f64, wd: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        self.t += 1;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let mhat = self.m / (1.0 - b1.powi(self.t));
        let vhat = self.v / (1.0 - b2.powi(self.t));
        w - lr * (mhat / (vhat.sqrt() + eps) + wd * w)
    }
}

#[test]
fn adam_matches_scalar_oracle_over_100_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let init = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);
    let mut store = ParamStore::new();
    store.add("w", init.clone(), true);
    store.add("frozen", Tensor::ones(&[2]), false);
    let mut adam = Adam::new(&store, 0.9, 0.999, 1e-8, 5e-5);
    let mut oracle: Vec<(f64, ScalarAdam)> = init
        .data()
        .iter()
        .map(|&w| (w, ScalarAdam { m: 0.0, v: 0.0, t: 0 }))
        .collect();
    for step in 0..100 {
        let lr = if step < 50 { 1e-2 } else { 2.5e-3 };
        let grads: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        store.zero_grad();
        let id = store.find("w").unwrap();
        store.get_mut(id).grad = Tensor::new(&[2, 3], grads.clone()).unwrap();
        let frozen = store.find("frozen").unwrap();
        store.get_mut(frozen).grad = Tensor::full(&[2], 9.0);
        assert!(adam.step(&mut store, lr));
        for ((w, o), g) in oracle.iter_mut().zip(&grads) {
            *w = o.step(*w, *g, lr, 5e-5);
        }
        for (a, (b, _)) in store.value(id).data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9, "step {step}: {a} vs {b}");
        }
    }
    assert_eq!(store.value(store.find("frozen").unwrap()).data(), &[1.0, 1.0]);
}

#[test]
fn early_stopping_fires_after_exactly_patience_bad_epochs() {
    for patience in 1..6 {
        let mut e = EarlyStopping::new(patience, 1e-4);
        assert!(!e.step(1.0));
        for k in 1..=patience {
            assert_eq!(e.step(1.0), k == patience);
        }
    }
}

proptest! {
    #[test]
    fn plateau_never_increases_lr(values in prop::collection::vec(0.0f64..10.0, 1..60), patience in 1usize..6) {
        let mut p = Plateau::new(0.25, patience, 1e-4);
        let mut lr = 1e-3;
        for v in values {
            let next = p.step(v, lr);
            prop_assert!(next <= lr);
            lr = next;
        }
    }
}
