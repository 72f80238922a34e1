//! Central finite-difference checking of analytic gradients.
//!
//! The checker only ever calls the forward pass when computing numeric
//! derivatives, so it is independent of the backward code it verifies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Denominator floor for the relative error. Gradient entries smaller than
/// this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Outcome of one gradient suite.
#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub trials: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl SuiteReport {
    pub fn new(name: &str, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            trials: 0,
            checked: 0,
            max_rel_err: 0.0,
            tolerance,
            passed: true,
        }
    }

    pub fn absorb(&mut self, trial_max: f64, checked: usize) {
        self.trials += 1;
        self.checked += checked;
        if trial_max.is_nan() || trial_max > self.max_rel_err {
            self.max_rel_err = trial_max;
        }
        self.passed = self.max_rel_err < self.tolerance;
    }
}

/// Which entries of an input to check.
#[derive(Clone, Debug)]
pub enum Coords {
    All,
    None,
    Sample(usize),
}

/// A differentiable function of several tensors, built on a fresh graph.
pub trait GraphFn: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>> GraphFn for F {}

fn evaluate<F: GraphFn>(f: &F, inputs: &[Tensor<f64>], probe: &Tensor<f64>) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let o = g.value(out);
    Ok(o.data().iter().zip(probe.data()).map(|(a, b)| a * b).collect())
}

/// Compares the analytic gradient of `Σ probe ⊙ f(inputs)` against central
/// differences, where `probe` is a fixed random tensor. Returns the largest
/// relative error and the number of entries compared.
pub fn check<F: GraphFn>(
    f: &F,
    inputs: &[Tensor<f64>],
    coords: &[Coords],
    rng: &mut impl Rng,
) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(coords)
        .map(|(t, c)| g.leaf(t.clone(), !matches!(c, Coords::None)))
        .collect();
    let out = f(&mut g, &vars)?;
    let probe = if g.value(out).numel() == 1 {
        Tensor::ones(g.shape(out))
    } else {
        Tensor::uniform(g.shape(out), -1.0, 1.0, rng)
    };
    let p = g.constant(probe.clone());
    let weighted = g.mul(out, p)?;
    let loss = g.sum(weighted);
    g.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (i, coord) in coords.iter().enumerate() {
        let indices: Vec<usize> = match coord {
            Coords::None => continue,
            Coords::All => (0..inputs[i].numel()).collect(),
            Coords::Sample(k) => (0..*k).map(|_| rng.random_range(0..inputs[i].numel())).collect(),
        };
        let analytic = g.grad(vars[i]).expect("leaf gradient after backward").clone();
        for j in indices {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let hi = evaluate(f, &plus, &probe)?;
            let lo = evaluate(f, &minus, &probe)?;
            // Differencing per output entry before summing keeps untouched
            // outputs at exactly zero.
            let numeric = hi.iter().zip(&lo).map(|(a, b)| a - b).sum::<f64>() / (2.0 * STEP);
            let err = rel_error(analytic.data()[j], numeric);
            if err.is_nan() || err > worst {
                worst = err;
            }
            checked += 1;
        }
    }
    Ok((worst, checked))
}

/// Runs `trials` seeded trials of `check`, drawing fresh inputs each time.
pub fn run_suite<F, G>(
    name: &str,
    tolerance: f64,
    trials: usize,
    seed: u64,
    make_inputs: G,
    f: F,
) -> Result<SuiteReport>
where
    F: GraphFn,
    G: Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Vec<Coords>),
{
    let mut report = SuiteReport::new(name, tolerance);
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(t as u64));
        let (inputs, coords) = make_inputs(&mut rng);
        let (worst, checked) = check(&f, &inputs, &coords, &mut rng)?;
        report.absorb(worst, checked);
    }
    Ok(report)
}

/// Random values bounded away from zero by `margin`, so that kinks (ReLU)
/// are never straddled by a finite-difference step.
pub fn away_from_zero(shape: &[usize], margin: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let mag = rng.random_range(margin..1.0);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

/// Gradient suites for every differentiable tensor operation.
pub fn op_suites(trials: usize) -> Result<Vec<SuiteReport>> {
    const TOL: f64 = 1e-6;
    let n = |r: &mut ChaCha8Rng, s: &[usize]| Tensor::<f64>::randn(s, 1.0, r);
    let all2 = || vec![Coords::All, Coords::All];
    let mut out = Vec::new();

    out.push(run_suite(
        "conv2d",
        TOL,
        trials,
        1,
        |r| {
            let x = n(r, &[2, 3, 5, 5]);
            let w = n(r, &[4, 3, 3, 3]);
            let b = n(r, &[4]);
            (vec![x, w, b], vec![Coords::All, Coords::All, Coords::All])
        },
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1),
    )?);
    out.push(run_suite(
        "conv2d_stride2",
        TOL,
        trials,
        2,
        |r| (vec![n(r, &[2, 2, 6, 6]), n(r, &[3, 2, 3, 3])], all2()),
        |g, v| g.conv2d(v[0], v[1], None, 2, 1),
    )?);
    out.push(run_suite(
        "residual_conv2d",
        TOL,
        trials,
        3,
        |r| (vec![n(r, &[1, 2, 6, 6]), n(r, &[3, 2, 5, 5])], all2()),
        |g, v| g.residual_conv2d(v[0], v[1]),
    )?);
    out.push(run_suite(
        "relu",
        TOL,
        trials,
        4,
        |r| (vec![away_from_zero(&[2, 3, 4, 4], 1e-3, r)], vec![Coords::All]),
        |g, v| Ok(g.relu(v[0])),
    )?);
    out.push(run_suite(
        "sigmoid",
        TOL,
        trials,
        5,
        |r| (vec![n(r, &[2, 3, 4, 4]).map(|v| 3.0 * v)], vec![Coords::All]),
        |g, v| Ok(g.sigmoid(v[0])),
    )?);
    out.push(run_suite(
        "layer_norm",
        TOL,
        trials,
        6,
        |r| {
            let x = n(r, &[2, 5, 2, 3]);
            let gm = n(r, &[5]);
            let bt = n(r, &[5]);
            (vec![x, gm, bt], vec![Coords::All, Coords::All, Coords::All])
        },
        |g, v| g.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5),
    )?);
    out.push(run_suite(
        "softmax_positions",
        TOL,
        trials,
        7,
        |r| (vec![n(r, &[2, 1, 3, 4]).map(|v| 2.0 * v)], vec![Coords::All]),
        |g, v| g.softmax_positions(v[0]),
    )?);
    out.push(run_suite(
        "sum",
        TOL,
        trials,
        8,
        |r| (vec![n(r, &[3, 4])], vec![Coords::All]),
        |g, v| Ok(g.sum(v[0])),
    )?);
    out.push(run_suite(
        "mean",
        TOL,
        trials,
        9,
        |r| (vec![n(r, &[3, 4])], vec![Coords::All]),
        |g, v| Ok(g.mean(v[0])),
    )?);
    out.push(run_suite(
        "global_avg_pool",
        TOL,
        trials,
        10,
        |r| (vec![n(r, &[2, 3, 3, 5])], vec![Coords::All]),
        |g, v| g.global_avg_pool(v[0]),
    )?);
    out.push(run_suite(
        "upsample",
        TOL,
        trials,
        11,
        |r| (vec![n(r, &[2, 2, 3, 4])], vec![Coords::All]),
        |g, v| g.upsample(v[0], 2),
    )?);
    out.push(run_suite(
        "concat_channels",
        TOL,
        trials,
        12,
        |r| (vec![n(r, &[2, 3, 3, 3]), n(r, &[2, 2, 3, 3])], all2()),
        |g, v| g.concat_channels(&[v[0], v[1]]),
    )?);
    out.push(run_suite(
        "broadcast_add",
        TOL,
        trials,
        13,
        |r| (vec![n(r, &[2, 3, 3, 3]), n(r, &[2, 3, 1, 1])], all2()),
        |g, v| g.broadcast_add(v[0], v[1]),
    )?);
    out.push(run_suite(
        "mul_broadcast",
        TOL,
        trials,
        14,
        |r| (vec![n(r, &[2, 3, 3, 3]), n(r, &[2, 1, 3, 3])], all2()),
        |g, v| g.mul(v[0], v[1]),
    )?);
    out.push(run_suite(
        "mul",
        TOL,
        trials,
        15,
        |r| (vec![n(r, &[2, 3, 2, 2]), n(r, &[2, 3, 2, 2])], all2()),
        |g, v| g.mul(v[0], v[1]),
    )?);
    out.push(run_suite(
        "add_scale",
        TOL,
        trials,
        16,
        |r| (vec![n(r, &[2, 3, 2, 2]), n(r, &[2, 3, 2, 2])], all2()),
        |g, v| {
            let s = g.add(v[0], v[1])?;
            Ok(g.scale(s, -1.7))
        },
    )?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_gradcheck() {
        for r in op_suites(10).unwrap() {
            assert!(r.passed, "{} max rel err {:e}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn checker_detects_a_wrong_gradient() {
        // A custom op whose declared gradient is off by a factor of two.
        struct Wrong;
        impl crate::tensor::CustomOp<f64> for Wrong {
            fn name(&self) -> &'static str {
                "wrong"
            }
            fn forward(&self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
                Ok(inputs[0].map(|v| v * v))
            }
            fn backward(
                &self,
                inputs: &[&Tensor<f64>],
                _output: &Tensor<f64>,
                grad: &Tensor<f64>,
            ) -> Vec<Option<Tensor<f64>>> {
                let d = inputs[0]
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(x, g)| 4.0 * x * g)
                    .collect();
                vec![Some(Tensor::new(inputs[0].shape(), d).unwrap())]
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[5], 1.0, &mut rng);
        let (worst, _) = check(
            &|g: &mut Graph<f64>, v: &[Var]| g.custom(Box::new(Wrong), v),
            &[x],
            &[Coords::All],
            &mut rng,
        )
        .unwrap();
        assert!(worst > 0.1);
    }
}
