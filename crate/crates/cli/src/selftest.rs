//! Fast sanity checks over every module, one line per check.

use std::process::ExitCode;

use forgeloc::error::Result;
use forgeloc::frontend::ela_batch;
use forgeloc::loss::dice;
use forgeloc::metrics::pixel_auc;
use forgeloc::model::{Network, NetworkConfig};
use forgeloc::nn::Session;
use forgeloc::selfcheck;
use forgeloc::synth::dataset::{generate_split, DatasetSpec};
use forgeloc::tensor::gradcheck::op_suites;
use forgeloc::tensor::Tensor;

fn gray_image_is_silent() -> Result<bool> {
    let gray = Tensor::<f32>::full(&[1, 3, 64, 64], 128.0 / 255.0);
    let ela = ela_batch(&gray, 90)?;
    let (net, store) = Network::new::<f32>(&NetworkConfig::default(), 0)?;
    let mut s = Session::new(&store, false);
    let img = s.input(gray);
    let e = s.input(ela.clone());
    let parts = net.frontend.forward_parts(&mut s, img, e)?;
    let zero = |t: &Tensor<f32>| t.data().iter().all(|&v| v == 0.0);
    Ok(zero(&ela) && zero(s.graph.value(parts.srm)) && zero(s.graph.value(parts.bayar)))
}

fn network_forward_is_well_formed() -> Result<bool> {
    let spec = DatasetSpec {
        train: 2,
        ..DatasetSpec::default()
    };
    let samples = generate_split(&spec, 0)?;
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let (net, store) = Network::new::<f32>(&NetworkConfig::default(), 0)?;
    let (map, probs) = net.predict(&store, Tensor::stack(&images)?)?;
    let in_range = |v: f32| (0.0..=1.0).contains(&v);
    Ok(map.shape() == [2, 1, 64, 64] && map.data().iter().all(|&v| in_range(v)) && probs.iter().all(|&p| in_range(p)))
}

pub fn run() -> Result<ExitCode> {
    let mut checks: Vec<(&str, bool)> = vec![
        ("mid-gray image gives zero ELA, SRM and Bayar responses", gray_image_is_silent()?),
        (
            "dice loss of an empty prediction against 100 pixels",
            (dice(&[0.0f64; 100], &[1.0f64; 100], 1e-7) - 20.723).abs() < 1e-3,
        ),
        (
            "pixel AUC of the handcrafted case is 0.75",
            pixel_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true])? == 0.75,
        ),
        ("network forward on synthetic samples", network_forward_is_well_formed()?),
    ];
    let ops = op_suites(3)?.into_iter().all(|r| r.passed);
    checks.push(("tensor op gradients", ops));
    let blocks = selfcheck::loss_suites(3)?
        .into_iter()
        .chain(selfcheck::gca_suites(3)?)
        .all(|r| r.passed);
    checks.push(("loss and GCA gradients", blocks));
    let mut ok = true;
    for (name, passed) in &checks {
        ok &= passed;
        println!("{} {name}", if *passed { "PASS" } else { "FAIL" });
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
