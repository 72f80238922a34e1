use super::kernels::{self, ConvMode, LayerNormSaved};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside the graph core (the loss
/// functions use this).
pub trait CustomOp<T: Float> {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;

    /// Gradient with respect to each input, given the gradient of the
    /// output. `None` means "no gradient flows to this input".
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Float> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        mode: ConvMode,
    },
    Relu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        saved: LayerNormSaved<T>,
    },
    SoftmaxPositions(Var),
    Sum(Var),
    Mean(Var),
    GlobalAvgPool(Var),
    Upsample {
        x: Var,
        factor: usize,
    },
    Concat(Vec<Var>),
    BroadcastAdd {
        x: Var,
        v: Var,
    },
    Mul {
        x: Var,
        y: Var,
    },
    Add(Var, Var),
    Scale(Var, T),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Records tensor operations in evaluation order so that [`Graph::backward`]
/// can replay them in reverse.
///
/// Leaves created with `requires_grad` accumulate gradients across calls
/// to `backward` until [`Graph::zero_grad`].
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf. After `backward`, every leaf that
    /// requires grad has one (zero if the loss does not depend on it).
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv2d_mode(x, w, b, stride, pad, ConvMode::Zero)
    }

    /// Convolution applied to centred differences `x(p+o) − x(p)` with
    /// replicate padding (stride 1, same output size). For a zero-sum
    /// kernel this equals ordinary convolution in the interior, and the
    /// response to any constant image is exactly zero.
    pub fn residual_conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let k = self.shape(w).get(2).copied().unwrap_or(1);
        self.conv2d_mode(x, w, None, 1, k / 2, ConvMode::Residual)
    }

    fn conv2d_mode(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        mode: ConvMode,
    ) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
            mode,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                mode,
            },
            &inputs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Normalizes over the channel axis at every position, then applies the
    /// optional per-channel affine `gamma · x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        let (out, saved) = kernels::layer_norm_forward(
            self.value(x),
            gamma.map(|g| self.value(g)),
            beta.map(|b| self.value(b)),
            T::of(eps),
        )?;
        let mut inputs = vec![x];
        inputs.extend(gamma);
        inputs.extend(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, saved }, &inputs))
    }

    /// Softmax over all H·W positions of every (n, c) plane.
    pub fn softmax_positions(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax_positions(self.value(x))?;
        Ok(self.push(out, Op::SoftmaxPositions(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / T::of(t.numel() as f64));
        self.push(out, Op::Mean(x), &[x])
    }

    /// N×C×H×W → N×C×1×1 spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let inv = T::one() / T::of((h * w) as f64);
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(&[n, c, 1, 1], data)?;
        Ok(self.push(out, Op::GlobalAvgPool(x), &[x]))
    }

    /// Bilinear upsampling by an integer factor (half-pixel centres).
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = kernels::upsample_forward(self.value(x), factor)?;
        Ok(self.push(out, Op::Upsample { x, factor }, &[x]))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut total_c = 0;
        for &v in xs {
            let (vn, vc, vh, vw) = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(shape_err("concat_channels", self.shape(first), self.shape(v)));
            }
            total_c += vc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for &v in xs {
                data.extend_from_slice(self.value(v).image(b));
            }
        }
        let out = Tensor::new(&[n, total_c, h, w], data)?;
        Ok(self.push(out, Op::Concat(xs.to_vec()), xs))
    }

    /// `x + v` with `v` of shape N×C×1×1 (or 1×C×1×1) broadcast over positions.
    pub fn broadcast_add(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (vn, vc, vh, vw) = self.value(v).dims4()?;
        if vc != c || vh != 1 || vw != 1 || (vn != n && vn != 1) {
            return Err(shape_err("broadcast_add", self.shape(x), self.shape(v)));
        }
        let plane = h * w;
        let vd = self.value(v).data();
        let mut out = self.value(x).data().to_vec();
        for b in 0..n {
            for ch in 0..c {
                let add = vd[if vn == 1 { ch } else { b * c + ch }];
                out[(b * c + ch) * plane..][..plane]
                    .iter_mut()
                    .for_each(|o| *o += add);
            }
        }
        let out = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(out, Op::BroadcastAdd { x, v }, &[x, v]))
    }

    /// Elementwise product. `y` may match `x` exactly or be N×1×H×W, in
    /// which case it multiplies every channel.
    pub fn mul(&mut self, x: Var, y: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ys = self.shape(y);
        let out = if xs == ys {
            let data = self
                .value(x)
                .data()
                .iter()
                .zip(self.value(y).data())
                .map(|(&a, &b)| a * b)
                .collect();
            Tensor::new(xs, data)?
        } else {
            let (n, c, h, w) = self.value(x).dims4()?;
            if ys != [n, 1, h, w] {
                return Err(shape_err("mul", xs, ys));
            }
            let plane = h * w;
            let yd = self.value(y).data();
            let mut data = self.value(x).data().to_vec();
            for b in 0..n {
                let gate = &yd[b * plane..][..plane];
                for ch in 0..c {
                    for (o, &g) in data[(b * c + ch) * plane..][..plane].iter_mut().zip(gate) {
                        *o *= g;
                    }
                }
            }
            Tensor::new(&[n, c, h, w], data)?
        };
        Ok(self.push(out, Op::Mul { x, y }, &[x, y]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp<T>>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&values)?;
        Ok(self.push(
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        ))
    }

    /// Propagates d(loss)/d(node) back to every leaf reachable from `loss`
    /// and adds the result into each leaf's gradient accumulator.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, ig) in self.node_backward(i, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&ig)?,
                    slot @ None => *slot = Some(ig),
                }
            }
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let g = grads
                .get_mut(i)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g)?,
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                mode,
            } => {
                let need = [rg(*x), rg(*w), b.is_some_and(rg)];
                let grads = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    *mode,
                    need,
                )?;
                out.extend(grads.dx.map(|d| (*x, d)));
                out.extend(grads.dw.map(|d| (*w, d)));
                if let (Some(b), Some(db)) = (b, grads.db) {
                    out.push((*b, db));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&a, &d)| if a > T::zero() { d } else { T::zero() })
                    .collect();
                out.push((*x, Tensor::new(xv.shape(), data)?));
            }
            Op::Sigmoid(x) => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &d)| d * y * (T::one() - y))
                    .collect();
                out.push((*x, Tensor::new(node.value.shape(), data)?));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved,
            } => {
                let (dx, dgamma, dbeta) = kernels::layer_norm_backward(
                    self.shape(*x),
                    saved,
                    gamma.map(|v| self.value(v)),
                    g,
                );
                out.push((*x, dx));
                if let Some(gm) = gamma {
                    out.push((*gm, dgamma.reshape(self.shape(*gm))?));
                }
                if let Some(bt) = beta {
                    out.push((*bt, dbeta.reshape(self.shape(*bt))?));
                }
            }
            Op::SoftmaxPositions(x) => {
                out.push((*x, kernels::softmax_positions_backward(&node.value, g)));
            }
            Op::Sum(x) => out.push((*x, Tensor::full(self.shape(*x), g.item()))),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                out.push((*x, Tensor::full(self.shape(*x), g.item() / T::of(n as f64))));
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.shape(*x);
                let plane = shape[2] * shape[3];
                let inv = T::one() / T::of(plane as f64);
                let mut data = Vec::with_capacity(plane * g.numel());
                for &gv in g.data() {
                    data.extend(std::iter::repeat_n(gv * inv, plane));
                }
                out.push((*x, Tensor::new(shape, data)?));
            }
            Op::Upsample { x, factor } => {
                out.push((*x, kernels::upsample_backward(self.shape(*x), g, *factor)?));
            }
            Op::Concat(xs) => {
                let (n, _, h, w) = node.value.dims4()?;
                let plane = h * w;
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    let mut data = Vec::with_capacity(n * c * plane);
                    for b in 0..n {
                        data.extend_from_slice(&g.data()[(b * total + offset) * plane..][..c * plane]);
                    }
                    out.push((v, Tensor::new(self.shape(v), data)?));
                    offset += c;
                }
            }
            Op::BroadcastAdd { x, v } => {
                out.push((*x, g.clone()));
                let (n, c, h, w) = g.dims4()?;
                let vn = self.shape(*v)[0];
                let mut dv = vec![T::zero(); vn * c];
                for (idx, plane) in g.data().chunks(h * w).enumerate() {
                    let (b, ch) = (idx / c, idx % c);
                    let slot = if vn == 1 { ch } else { b * c + ch };
                    dv[slot] += plane.iter().copied().sum::<T>();
                }
                debug_assert!(vn == 1 || vn == n);
                out.push((*v, Tensor::new(self.shape(*v), dv)?));
            }
            Op::Mul { x, y } => {
                let xv = self.value(*x);
                let yv = self.value(*y);
                if xv.shape() == yv.shape() {
                    let dx = g.data().iter().zip(yv.data()).map(|(&d, &b)| d * b).collect();
                    let dy = g.data().iter().zip(xv.data()).map(|(&d, &a)| d * a).collect();
                    out.push((*x, Tensor::new(xv.shape(), dx)?));
                    out.push((*y, Tensor::new(yv.shape(), dy)?));
                } else {
                    let (n, c, h, w) = xv.dims4()?;
                    let plane = h * w;
                    let mut dx = vec![T::zero(); xv.numel()];
                    let mut dy = vec![T::zero(); yv.numel()];
                    for b in 0..n {
                        let gate = &yv.data()[b * plane..][..plane];
                        let dgate = &mut dy[b * plane..][..plane];
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            for p in 0..plane {
                                let d = g.data()[base + p];
                                dx[base + p] = d * gate[p];
                                dgate[p] += d * xv.data()[base + p];
                            }
                        }
                    }
                    out.push((*x, Tensor::new(xv.shape(), dx)?));
                    out.push((*y, Tensor::new(yv.shape(), dy)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Scale(x, s) => out.push((*x, g.map(|d| d * *s))),
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = op.backward(&values, &node.value, g);
                if grads.len() != inputs.len() {
                    return Err(Error::invalid(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (&v, d) in inputs.iter().zip(grads) {
                    if let Some(d) = d {
                        out.push((v, d));
                    }
                }
            }
        }
        Ok(out)
    }
}

#[inline]
pub(crate) fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn pointwise_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(t(&[1], &[0.0]));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).item(), 0.5);
    }

    #[test]
    fn identity_convolution() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 1, 3, 4], |i| i as f64 * 0.5));
        let w = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn all_ones_kernel_sums_neighbourhood() {
        let c: f64 = 0.3;
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 5, 5], c));
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), &[1, 1, 5, 5]);
        for yy in 1..4 {
            for xx in 1..4 {
                assert!((out.data()[yy * 5 + xx] - 9.0 * c).abs() < 1e-12);
            }
        }
        // Corner sees four in-bounds taps.
        assert!((out.data()[0] - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn conv_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let w = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
        let err = g.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[1, 3, 8, 8]") && err.contains("[4, 2, 3, 3]"), "{err}");
    }

    #[test]
    fn layer_norm_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 4, 2, 2], 3.0));
        let y = g.layer_norm(x, None, None, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let x = g.constant(t(&[1, 2, 1, 1], &[1.0, 3.0]));
        let y = g.layer_norm(x, None, None, 1e-14).unwrap();
        let v = g.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::full(&[1, 1, 2, 2], 0.7));
        let y = g.softmax_positions(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let x = g.constant(t(&[1, 1, 1, 2], &[0.0, 3f64.ln()]));
        let y = g.softmax_positions(x).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let m = g.mean(x);
        assert_eq!(g.value(m).item(), 2.5);
        let c = g.constant(Tensor::full(&[1, 2, 3, 3], 1.5));
        let p = g.global_avg_pool(c).unwrap();
        assert_eq!(g.shape(p), &[1, 2, 1, 1]);
        assert!(g.value(p).data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::full(&[1, 2, 3, 5], 0.4));
        let y = g.upsample(x, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 6, 10]);
        assert!(g.value(y).data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn concat_and_slice_back() {
        let mut g = Graph::new();
        let a = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64);
        let b = Tensor::from_fn(&[2, 5, 2, 2], |i| -(i as f64));
        let av = g.constant(a.clone());
        let bv = g.constant(b.clone());
        let c = g.concat_channels(&[av, bv]).unwrap();
        let out = g.value(c);
        assert_eq!(out.shape(), &[2, 8, 2, 2]);
        for n in 0..2 {
            assert_eq!(out.channels(n, 0, 3).unwrap(), a.channels(n, 0, 3).unwrap());
            assert_eq!(out.channels(n, 3, 8).unwrap(), b.channels(n, 0, 5).unwrap());
        }
        let bad = g.constant(Tensor::zeros(&[2, 1, 3, 2]));
        assert!(g.concat_channels(&[av, bad]).is_err());
    }

    #[test]
    fn broadcast_add_and_mul_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 2, 2, 2]));
        let v = g.constant(t(&[1, 2, 1, 1], &[1.0, 2.0]));
        let y = g.broadcast_add(x, v).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 3.0]);
        let zero = g.constant(Tensor::zeros(&[1, 2, 1, 1]));
        let y0 = g.broadcast_add(x, zero).unwrap();
        assert_eq!(g.value(y0), g.value(x));
        let bad = g.constant(Tensor::zeros(&[1, 3, 1, 1]));
        assert!(g.broadcast_add(x, bad).is_err());

        let f = g.constant(Tensor::from_fn(&[1, 3, 2, 2], |i| i as f64 - 4.0));
        let ones = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        let zeros = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let m1 = g.mul(f, ones).unwrap();
        assert_eq!(g.value(m1), g.value(f));
        let m0 = g.mul(f, zeros).unwrap();
        assert!(g.value(m0).data().iter().all(|&v| v == 0.0));
        let bad = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(g.mul(f, bad).is_err());
    }

    #[test]
    fn backward_basics() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let xx = g.mul(x, x).unwrap();
        let s = g.sum(xx);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
        // Accumulation: a second call doubles the gradient exactly.
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, -8.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn unused_leaf_gets_exact_zero_and_non_scalar_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let unused = g.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0; 4]);
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }
}
