//! Adam with decoupled weight decay, plateau learning-rate schedule and
//! early stopping.

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update from the accumulated gradients. Returns `false`
    /// (and changes nothing) when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> bool {
        let finite = store
            .iter()
            .filter(|p| p.trainable)
            .all(|p| p.grad.data().iter().all(|g| g.is_finite()));
        if !finite {
            return false;
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (ob1, ob2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let (c1, c2) = (T::of(c1), T::of(c2));
        let (lr, eps, wd) = (T::of(lr), T::of(self.eps), T::of(self.weight_decay));
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let it = p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((w, &g), (m, v)) in it {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
            }
        }
        true
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs
/// without relative improvement of at least `threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

fn improves(value: f64, best: Option<f64>, threshold: f64) -> bool {
    match best {
        None => value.is_finite(),
        Some(b) => value < b - threshold * b.abs(),
    }
}

impl Plateau {
    pub fn new(factor: f64, patience: usize, threshold: f64) -> Self {
        Self {
            factor,
            patience,
            threshold,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's metric and returns the learning rate to use
    /// next.
    pub fn step(&mut self, metric: f64, lr: f64) -> f64 {
        if improves(metric, self.best, self.threshold) {
            self.best = Some(metric);
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub threshold: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, threshold: f64) -> Self {
        Self {
            patience,
            threshold,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Records one epoch; `true` means stop now.
    pub fn step(&mut self, metric: f64) -> bool {
        if improves(metric, self.best, self.threshold) {
            self.best = Some(metric);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        self.bad_epochs >= self.patience
    }
}
