//! Named parameter storage and the small set of layers the network uses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Frozen parameters are bound as constants and never updated.
    pub trainable: bool,
}

/// Owns every parameter of a model, in creation order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name,
            value,
            grad,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Adds gradients collected by [`Session::backward`].
    pub fn accumulate(&mut self, grads: Vec<(ParamId, Tensor<T>)>) -> Result<()> {
        for (id, g) in grads {
            self.params[id.0].grad.add_assign(&g)?;
        }
        Ok(())
    }

    /// Same parameters converted to another element type.
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    /// Copies values from `other`, matching by name and shape.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .params
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {}", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_values",
                    lhs: p.value.shape().to_vec(),
                    rhs: src.value.shape().to_vec(),
                });
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

/// One forward pass: a fresh graph plus lazy binding of parameters as
/// graph leaves.
pub struct Session<'a, T: Float> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    track_grads: bool,
}

impl<'a, T: Float> Session<'a, T> {
    /// `track_grads = false` binds every parameter as a constant
    /// (inference).
    pub fn new(store: &'a ParamStore<T>, track_grads: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            track_grads,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self
            .graph
            .leaf(p.value.clone(), self.track_grads && p.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.graph.constant(t)
    }

    /// Backpropagates `loss` and returns the gradient of every bound
    /// trainable parameter.
    pub fn backward(&mut self, loss: Var) -> Result<Vec<(ParamId, Tensor<T>)>> {
        self.graph.zero_grad();
        self.graph.backward(loss)?;
        let mut out = Vec::new();
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = self.graph.grad(*v) {
                    out.push((ParamId(i), g.clone()));
                }
            }
        }
        Ok(out)
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    He,
    /// Normal with the given std.
    Normal(f64),
    Zero,
}

impl Init {
    fn tensor<T: Float>(self, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
        match self {
            Init::He => Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng),
            Init::Normal(std) => Tensor::randn(shape, std, rng),
            Init::Zero => Tensor::zeros(shape),
        }
    }
}

/// Square-kernel 2-D convolution with optional bias.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = init.tensor(&[cout, cin, k, k], cin * k * k, rng);
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    /// 1×1 convolution (a per-position linear map).
    pub fn pointwise<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        Self::new(store, name, cin, cout, 1, 1, 0, init, rng)
    }

    pub fn forward<T: Float>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn out_channels<T: Float>(&self, store: &ParamStore<T>) -> usize {
        store.value(self.weight).shape()[0]
    }
}

/// Channel-wise layer normalization with learnable affine.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            eps: 1e-5,
        }
    }

    pub fn forward<T: Float>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        s.graph.layer_norm(x, Some(g), Some(b), self.eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn session_collects_grads_for_trainable_params_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 1, 1, Init::He, &mut rng);
        let frozen = store.add("frozen", Tensor::ones(&[1, 3, 1, 1]), false);
        let mut s = Session::new(&store, true);
        let x = s.input(Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng));
        let y = conv.forward(&mut s, x).unwrap();
        let f = s.param(frozen);
        let y = s.graph.broadcast_add(y, f).unwrap();
        let loss = s.graph.sum(y);
        let grads = s.backward(loss).unwrap();
        assert_eq!(grads.len(), 2);
        store.accumulate(grads).unwrap();
        let bias_grad = &store.get(conv.bias.unwrap()).grad;
        // d(sum)/d(bias) = number of output positions.
        assert!(bias_grad.data().iter().all(|&g| g == 16.0));
        assert_eq!(store.trainable_count(), 3 * 2 * 9 + 3);
    }
}
