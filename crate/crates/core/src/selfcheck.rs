//! Gradient suites for the losses, the GCA block, the encoder and the
//! whole network, on top of the per-op suites in
//! [`crate::tensor::gradcheck`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::{Gca, GcaConfig, Transform};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::Result;
use crate::frontend::FrontendConfig;
use crate::loss::{bce_loss, combined_loss, dice_loss, focal_loss, DiceReduction, FocalVariant, LossConfig};
use crate::model::{Network, NetworkConfig};
use crate::nn::{ParamId, ParamStore, Session};
use crate::tensor::gradcheck::{self, rel_error, run_suite, Coords, SuiteReport, STEP};
use crate::tensor::{Graph, Tensor, Var};

/// Tolerance for single operations and small blocks.
pub const OP_TOL: f64 = 1e-6;
/// Tolerance for sampled coordinates of the full network.
pub const NETWORK_TOL: f64 = 1e-3;
const KINK_TOL: f64 = 1e-4;
const KINK_REDRAWS: usize = 20;

/// Probabilities in (0.02, 0.98) that stay `margin` away from 0.5, where
/// the reduced focal loss switches branches.
fn probs(shape: &[usize], margin: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let d = rng.random_range(margin..0.48);
        if rng.random_bool(0.5) {
            0.5 + d
        } else {
            0.5 - d
        }
    })
}

fn binary(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_bool(0.4) as u8 as f64)
}

pub fn loss_suites(trials: usize) -> Result<Vec<SuiteReport>> {
    let shape = [2, 1, 4, 4];
    let inputs = |r: &mut ChaCha8Rng| {
        (
            vec![probs(&shape, 1e-3, r), binary(&shape, r)],
            vec![Coords::All, Coords::None],
        )
    };
    let mut out = Vec::new();
    out.push(run_suite("bce_loss", OP_TOL, trials, 101, inputs, |g, v| {
        let t = g.value(v[1]).clone();
        bce_loss(g, v[0], &t, 1e-7)
    })?);
    for (name, reduction, seed) in [
        ("dice_loss_per_image", DiceReduction::PerImage, 102),
        ("dice_loss_batch", DiceReduction::Batch, 106),
    ] {
        out.push(run_suite(name, OP_TOL, trials, seed, inputs, move |g, v| {
            let t = g.value(v[1]).clone();
            dice_loss(g, v[0], &t, 1e-7, reduction)
        })?);
    }
    for (name, variant, seed) in [
        ("focal_loss", FocalVariant::Plain, 103),
        ("focal_loss_reduced", FocalVariant::Reduced, 104),
    ] {
        let cfg = LossConfig {
            focal: variant,
            ..LossConfig::default()
        };
        out.push(run_suite(name, OP_TOL, trials, seed, inputs, move |g, v| {
            let t = g.value(v[1]).clone();
            focal_loss(g, v[0], &t, &cfg)
        })?);
    }
    let cfg = LossConfig {
        w_pixel_bce: 0.7,
        ..LossConfig::default()
    };
    out.push(run_suite(
        "combined_loss",
        OP_TOL,
        trials,
        105,
        |r| {
            (
                vec![
                    probs(&[2, 1, 1, 1], 1e-3, r),
                    binary(&[2, 1, 1, 1], r),
                    probs(&shape, 1e-3, r),
                    binary(&shape, r),
                ],
                vec![Coords::All, Coords::None, Coords::All, Coords::None],
            )
        },
        move |g: &mut Graph<f64>, v: &[Var]| {
            let label = g.value(v[1]).clone();
            let mask = g.value(v[3]).clone();
            Ok(combined_loss(g, v[0], &label, v[2], &mask, &cfg)?.0)
        },
    )?);
    Ok(out)
}

/// Replaces every trainable parameter with N(0, std²) draws so that
/// zero-initialized paths are exercised.
fn randomize(store: &mut ParamStore<f64>, std: f64, rng: &mut impl Rng) {
    for p in store.iter_mut().filter(|p| p.trainable) {
        p.value = Tensor::randn(p.value.shape(), std, rng);
    }
}

/// Compares analytic parameter gradients of the scalar `f` against
/// central differences at `coords` randomly chosen entries. Each entry
/// picks a trainable tensor uniformly, then an element uniformly.
///
/// An entry where the differences at `STEP` and `STEP / 4` disagree sits
/// on a kink (a ReLU input within a step of zero) and is redrawn. Returns
/// the worst error and the number of entries actually compared.
pub fn check_params<F>(store: &ParamStore<f64>, f: F, coords: usize, rng: &mut impl Rng) -> Result<(f64, usize)>
where
    F: Fn(&mut Session<f64>) -> Result<Var>,
{
    let analytic = {
        let mut s = Session::new(store, true);
        let loss = f(&mut s)?;
        let grads = s.backward(loss)?;
        let mut acc = store.clone();
        acc.zero_grad();
        acc.accumulate(grads)?;
        acc
    };
    let eval = |st: &ParamStore<f64>| -> Result<f64> {
        let mut s = Session::new(st, false);
        let loss = f(&mut s)?;
        Ok(s.graph.value(loss).item())
    };
    let trainable: Vec<ParamId> = store.ids().filter(|&id| store.get(id).trainable).collect();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut probe = store.clone();
    let mut central = |id: ParamId, j: usize, h: f64| -> Result<f64> {
        let x = store.value(id).data()[j];
        probe.get_mut(id).value.data_mut()[j] = x + h;
        let hi = eval(&probe)?;
        probe.get_mut(id).value.data_mut()[j] = x - h;
        let lo = eval(&probe)?;
        probe.get_mut(id).value.data_mut()[j] = x;
        Ok((hi - lo) / (2.0 * h))
    };
    for _ in 0..coords * KINK_REDRAWS {
        if checked == coords {
            break;
        }
        let id = trainable[rng.random_range(0..trainable.len())];
        let j = rng.random_range(0..store.value(id).numel());
        let numeric = central(id, j, STEP)?;
        let fine = central(id, j, STEP / 4.0)?;
        if rel_error(numeric, fine) > KINK_TOL {
            continue;
        }
        checked += 1;
        let err = rel_error(analytic.get(id).grad.data()[j], numeric);
        if err.is_nan() || err > worst {
            worst = err;
        }
    }
    Ok((worst, checked))
}

/// The GCA block for both context transforms, checked with respect to
/// every parameter and both inputs.
pub fn gca_suites(trials: usize) -> Result<Vec<SuiteReport>> {
    let mut out = Vec::new();
    for (transform, seed) in [(Transform::BottleneckLnRelu, 201), (Transform::Plain1x1, 202)] {
        let mut report = SuiteReport::new(&format!("gca_{}", transform.name()), OP_TOL);
        for t in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 1_000_003 + t as u64);
            let cfg = GcaConfig {
                transform,
                ratio: 2,
                gate_width: Some(3),
                ..GcaConfig::default()
            };
            let mut store = ParamStore::<f64>::new();
            let gca = Gca::new(&mut store, "gca", 8, 3, &cfg, &mut rng);
            randomize(&mut store, 0.7, &mut rng);
            let f_l = store.add("f_l", Tensor::randn(&[2, 8, 3, 3], 1.0, &mut rng), true);
            let f_g = store.add("f_g", Tensor::randn(&[2, 3, 3, 3], 1.0, &mut rng), true);
            let probe = Tensor::<f64>::uniform(&[2, 8, 3, 3], -1.0, 1.0, &mut rng);
            let n = store.trainable_count();
            let (worst, checked) = check_params(
                &store,
                |s| {
                    let (a, b) = (s.param(f_l), s.param(f_g));
                    let o = gca.forward(s, a, b)?;
                    let p = s.input(probe.clone());
                    let w = s.graph.mul(o.theta, p)?;
                    Ok(s.graph.sum(w))
                },
                n.min(40),
                &mut rng,
            )?;
            report.absorb(worst, checked);
        }
        out.push(report);
    }
    Ok(out)
}

fn small_encoder_config(in_channels: usize) -> EncoderConfig {
    EncoderConfig {
        stage_channels: [3, 4, 4, 5, 5],
        blocks_per_stage: 2,
        in_channels,
        ..EncoderConfig::default()
    }
}

pub fn encoder_suite(trials: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("encoder", NETWORK_TOL);
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(301 * 1_000_003 + t as u64);
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut store, &small_encoder_config(2), &mut rng)?;
        randomize(&mut store, 0.6, &mut rng);
        let x = Tensor::randn(&[1, 2, 32, 32], 1.0, &mut rng);
        let (worst, checked) = check_params(
            &store,
            |s| {
                let xv = s.input(x.clone());
                let o = enc.forward(s, xv)?;
                let p = s.graph.sigmoid(o.class_logit);
                let mut total = s.graph.sum(p);
                for f in o.features {
                    let m = s.graph.mean(f);
                    total = s.graph.add(total, m)?;
                }
                Ok(total)
            },
            20,
            &mut rng,
        )?;
        report.absorb(worst, checked);
    }
    Ok(report)
}

/// Narrow network used for the full-network check; every component is
/// present, only the widths are reduced.
pub fn small_network_config() -> NetworkConfig {
    let frontend = FrontendConfig {
        rgb_filters: 3,
        ela_filters: 3,
        ..FrontendConfig::default()
    };
    NetworkConfig {
        encoder: small_encoder_config(frontend.out_channels()),
        frontend,
        ..NetworkConfig::default()
    }
}

/// Combined loss of the full network on a random 1×3×32×32 image and
/// mask, checked at `coords` sampled parameter entries per trial.
pub fn network_suite(trials: usize, coords: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("network", NETWORK_TOL);
    let cfg = small_network_config();
    let loss_cfg = LossConfig::default();
    for t in 0..trials {
        let seed = 401 * 1_000_003 + t as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (net, mut store) = Network::new::<f64>(&cfg, seed)?;
        randomize(&mut store, 0.3, &mut rng);
        net.project(&mut store);
        let image = Tensor::<f64>::uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng).map(|v| (v * 255.0).round() / 255.0);
        let ela = net.ela_input(&image)?;
        let mask = binary(&[1, 1, 32, 32], &mut rng);
        let label = Tensor::full(&[1, 1, 1, 1], 1.0);
        let (worst, checked) = check_params(
            &store,
            |s| {
                let o = net.forward_with_ela(s, image.clone(), ela.clone())?;
                Ok(combined_loss(&mut s.graph, o.class_prob, &label, o.map, &mask, &loss_cfg)?.0)
            },
            coords,
            &mut rng,
        )?;
        report.absorb(worst, checked);
    }
    Ok(report)
}

/// Every suite: per-op, losses, GCA, encoder and the full network.
pub fn all_suites(trials: usize, network_coords: usize) -> Result<Vec<SuiteReport>> {
    let mut out = gradcheck::op_suites(trials)?;
    out.extend(loss_suites(trials)?);
    out.extend(gca_suites(trials)?);
    out.push(encoder_suite(trials)?);
    out.push(network_suite(trials, network_coords)?);
    Ok(out)
}
