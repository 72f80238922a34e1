//! Ablation runner: trains each variant of one axis on the same data and
//! seeds, then reports test pixel AUC and F1.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::eval::evaluate;
use super::{Trainer, TrainConfig};
use crate::decoder::{Placement, Transform};
use crate::error::{Error, Result};
use crate::loss::FocalVariant;
use crate::synth::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    GcaVsBaseline,
    BottleneckRatio,
    Placement,
    TransformVariant,
    LossCombo,
}

impl Axis {
    pub const ALL: [Axis; 5] = [
        Axis::GcaVsBaseline,
        Axis::BottleneckRatio,
        Axis::Placement,
        Axis::TransformVariant,
        Axis::LossCombo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::GcaVsBaseline => "gca_vs_baseline",
            Axis::BottleneckRatio => "bottleneck_ratio",
            Axis::Placement => "placement",
            Axis::TransformVariant => "transform_variant",
            Axis::LossCombo => "loss_combo",
        }
    }

    /// Named configurations derived from `base`.
    pub fn variants(self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        let with = |f: &dyn Fn(&mut TrainConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Axis::GcaVsBaseline => vec![
                ("baseline".into(), with(&|c| c.network.gca.placement = Placement::Baseline)),
                ("gca".into(), with(&|c| c.network.gca.placement = Placement::AllDecoder)),
            ],
            Axis::BottleneckRatio => [4, 8, 16, 32]
                .into_iter()
                .map(|r| (format!("ratio_{r}"), with(&|c| c.network.gca.ratio = r)))
                .collect(),
            Axis::Placement => [
                Placement::AllDecoder,
                Placement::EndNodes,
                Placement::Intermediates,
                Placement::TopNodes,
            ]
            .into_iter()
            .map(|p| (p.name().to_string(), with(&|c| c.network.gca.placement = p)))
            .collect(),
            Axis::TransformVariant => [Transform::Plain1x1, Transform::BottleneckLnRelu]
                .into_iter()
                .map(|t| (t.name().to_string(), with(&|c| c.network.gca.transform = t)))
                .collect(),
            Axis::LossCombo => {
                let combo = |cls: f64, dice: f64, focal: f64, bce: f64, v: FocalVariant| {
                    with(&|c| {
                        c.loss.w_cls = cls;
                        c.loss.w_dice = if dice > 0.0 { base.loss.w_dice } else { 0.0 };
                        c.loss.w_focal = if focal > 0.0 { base.loss.w_focal } else { 0.0 };
                        c.loss.w_pixel_bce = bce;
                        c.loss.focal = v;
                    })
                };
                use FocalVariant::{Plain, Reduced};
                vec![
                    ("bce".into(), combo(0.0, 0.0, 0.0, 1.0, Plain)),
                    ("dsc".into(), combo(0.0, 1.0, 0.0, 0.0, Plain)),
                    ("dsc_fl".into(), combo(0.0, 1.0, 1.0, 0.0, Plain)),
                    ("dsc_fl_reduced".into(), combo(0.0, 1.0, 1.0, 0.0, Reduced)),
                    ("cls_dsc_fl_reduced".into(), combo(base.loss.w_cls, 1.0, 1.0, 0.0, Reduced)),
                ]
            }
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation axis {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub pixel_auc: Option<f64>,
    pub pixel_f1: f64,
    pub image_f1: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub runs: usize,
    pub auc_mean: f64,
    pub auc_sd: f64,
    pub f1_mean: f64,
    pub f1_sd: f64,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Sample mean and standard deviation per variant, in first-seen order.
pub fn summarize(rows: &[AblationRow]) -> Vec<VariantSummary> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == name).collect();
            let aucs: Vec<f64> = mine.iter().filter_map(|r| r.pixel_auc).collect();
            let f1s: Vec<f64> = mine.iter().map(|r| r.pixel_f1).collect();
            let (auc_mean, auc_sd) = mean_sd(&aucs);
            let (f1_mean, f1_sd) = mean_sd(&f1s);
            VariantSummary {
                variant: name.to_string(),
                runs: mine.len(),
                auc_mean,
                auc_sd,
                f1_mean,
                f1_sd,
            }
        })
        .collect()
}

pub fn table(summary: &[VariantSummary]) -> String {
    let mut s = format!("{:<22} {:>4} {:>17} {:>17}\n", "variant", "runs", "pixel AUC", "pixel F1");
    for v in summary {
        let _ = writeln!(
            s,
            "{:<22} {:>4} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4}",
            v.variant, v.runs, v.auc_mean, v.auc_sd, v.f1_mean, v.f1_sd
        );
    }
    s
}

pub fn rows_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,seed,pixel_auc,pixel_f1,image_f1,epochs\n");
    for r in rows {
        let auc = r.pixel_auc.map(|a| format!("{a:.6}")).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{}",
            r.variant, r.seed, auc, r.pixel_f1, r.image_f1, r.epochs
        );
    }
    s
}

/// Trains one variant for one seed and scores its best-validation
/// weights on `test`.
pub fn run_variant(
    name: &str,
    cfg: &TrainConfig,
    seed: u64,
    train: &[Sample],
    val: &[Sample],
    test: &[Sample],
) -> Result<AblationRow> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let mut t = Trainer::new(cfg)?;
    t.fit(train, val, None, None)?;
    let r = evaluate(&t.net, t.best_store(), test, &t.config.metrics, t.config.eval_batch_size)?;
    log::info!("{name} seed {seed}: auc {:?} f1 {:.4}", r.pixel_auc, r.pixel_f1);
    Ok(AblationRow {
        variant: name.to_string(),
        seed,
        pixel_auc: r.pixel_auc,
        pixel_f1: r.pixel_f1,
        image_f1: r.image_f1,
        epochs: t.state.epochs_done,
    })
}

/// Every variant of `axis` for every seed, seed-major.
pub fn ablate(
    axis: Axis,
    base: &TrainConfig,
    seeds: &[u64],
    train: &[Sample],
    val: &[Sample],
    test: &[Sample],
) -> Result<Vec<AblationRow>> {
    let variants = axis.variants(base);
    let mut rows = Vec::with_capacity(seeds.len() * variants.len());
    for &seed in seeds {
        for (name, cfg) in &variants {
            rows.push(run_variant(name, cfg, seed, train, val, test)?);
        }
    }
    Ok(rows)
}
