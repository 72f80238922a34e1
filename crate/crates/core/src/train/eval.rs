//! Test-set evaluation and the distortion robustness sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{collate, mix_seed};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricOptions, MetricsReport, Prediction};
use crate::model::Network;
use crate::nn::ParamStore;
use crate::synth::distort::{distort, Distortion};
use crate::synth::Sample;
use crate::tensor::Tensor;

/// Pairs network outputs for a batch with the ground truth of `samples`.
pub fn to_predictions(map: &Tensor<f32>, prob: &Tensor<f32>, samples: &[Sample]) -> Vec<Prediction> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| Prediction {
            map: map.image(i).iter().map(|&v| v as f64).collect(),
            mask: s.mask.data().iter().map(|&m| m >= 0.5).collect(),
            prob: prob.data()[i] as f64,
            label: s.label.is_forged(),
        })
        .collect()
}

/// Runs the network over `samples`, optionally distorting each image
/// first. Masks and labels are left untouched.
pub fn predict_samples(
    net: &Network,
    store: &ParamStore<f32>,
    samples: &[Sample],
    batch: usize,
    distortion: Option<&Distortion>,
) -> Result<Vec<Prediction>> {
    if batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut preds = Vec::with_capacity(samples.len());
    for (b, chunk) in samples.chunks(batch).enumerate() {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (mut images, _, _) = collate(&refs)?;
        if let Some(d) = distortion {
            let distorted = chunk
                .iter()
                .enumerate()
                .map(|(i, s)| distort(&s.image, d, mix_seed(&[(b * batch + i) as u64, 0xD157])))
                .collect::<Result<Vec<_>>>()?;
            images = Tensor::stack(&distorted)?;
        }
        let (map, probs) = net.predict(store, images)?;
        let prob = Tensor::new(&[probs.len()], probs)?;
        preds.extend(to_predictions(&map, &prob, chunk));
    }
    Ok(preds)
}

pub fn evaluate(
    net: &Network,
    store: &ParamStore<f32>,
    samples: &[Sample],
    opts: &MetricOptions,
    batch: usize,
) -> Result<MetricsReport> {
    let preds = predict_samples(net, store, samples, batch, None)?;
    Ok(metrics::report(&preds, opts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub distortion: String,
    pub parameter: String,
    pub auc: Option<f64>,
    pub f1: f64,
}

/// Clean baseline row followed by one row per distortion in `grid`.
pub fn robustness(
    net: &Network,
    store: &ParamStore<f32>,
    samples: &[Sample],
    grid: &[Distortion],
    opts: &MetricOptions,
    batch: usize,
) -> Result<Vec<SweepRow>> {
    for d in grid {
        d.validate()?;
    }
    let mut rows = Vec::with_capacity(grid.len() + 1);
    let clean = metrics::report(&predict_samples(net, store, samples, batch, None)?, opts);
    rows.push(SweepRow {
        distortion: "none".into(),
        parameter: String::new(),
        auc: clean.pixel_auc,
        f1: clean.pixel_f1,
    });
    for d in grid {
        let r = metrics::report(&predict_samples(net, store, samples, batch, Some(d))?, opts);
        log::info!("{} {}: auc {:?} f1 {:.4}", d.kind(), d.param(), r.pixel_auc, r.pixel_f1);
        rows.push(SweepRow {
            distortion: d.kind().into(),
            parameter: d.param(),
            auc: r.pixel_auc,
            f1: r.pixel_f1,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("distortion,parameter,auc,f1\n");
    for r in rows {
        let auc = r.auc.map(|a| format!("{a:.6}")).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{:.6}", r.distortion, r.parameter, auc, r.f1);
    }
    s
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    fs::write(path, sweep_csv(rows)).map_err(|e| Error::io(path, e))
}
