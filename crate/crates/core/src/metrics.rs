//! Pixel- and image-level evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ROC AUC from the rank statistic, with tied scores sharing the average
/// rank. Fails when the labels contain only one class.
pub fn pixel_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(format!(
            "AUC undefined: {pos} positive and {neg} negative labels"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_scores(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// F1, with no positives predicted or present counted as perfect.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

pub fn pixel_f1(pred: &[f64], mask: &[bool], threshold: f64) -> f64 {
    Confusion::from_scores(pred, mask, threshold).f1()
}

pub fn image_f1(probs: &[f64], labels: &[bool], threshold: f64) -> f64 {
    Confusion::from_scores(probs, labels, threshold).f1()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    #[default]
    E,
    Ten,
}

fn neglog(rate: f64, base: LogBase) -> f64 {
    match base {
        LogBase::E => -rate.ln(),
        LogBase::Ten => -rate.log10(),
    }
}

fn false_positives(pred: &[f64], mask: &[bool], threshold: f64) -> usize {
    pred.iter()
        .zip(mask)
        .filter(|&(&p, &m)| p >= threshold && !m)
        .count()
}

/// False-positive pixels over all pixels, and its negative log with the
/// rate floored at one pixel.
pub fn fpr_neglog(pred: &[f64], mask: &[bool], threshold: f64, base: LogBase) -> (f64, f64) {
    let n = pred.len().max(1) as f64;
    let fpr = false_positives(pred, mask, threshold) as f64 / n;
    (fpr, neglog(fpr.max(1.0 / n), base))
}

/// Like [`fpr_neglog`] but measured over the authentic pixels only
/// (`mask == false`), floored at one of them. Equal to [`fpr_neglog`] on
/// an all-authentic mask. `None` when every pixel is forged.
pub fn fpr_neglog_authentic(pred: &[f64], mask: &[bool], threshold: f64, base: LogBase) -> Option<(f64, f64)> {
    let negatives = mask.iter().filter(|&&m| !m).count();
    if negatives == 0 {
        return None;
    }
    let n = negatives as f64;
    let fpr = false_positives(pred, mask, threshold) as f64 / n;
    Some((fpr, neglog(fpr.max(1.0 / n), base)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AucMode {
    /// AUC per image, averaged over images with both classes present.
    #[default]
    PerImage,
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricOptions {
    pub threshold: f64,
    pub auc_mode: AucMode,
    pub log_base: LogBase,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            auc_mode: AucMode::PerImage,
            log_base: LogBase::E,
        }
    }
}

/// One evaluated image.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub map: Vec<f64>,
    pub mask: Vec<bool>,
    pub prob: f64,
    pub label: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Absent when no image (or the pooled set) has both classes.
    pub pixel_auc: Option<f64>,
    pub auc_note: Option<String>,
    pub auc_images: usize,
    pub pixel_f1: f64,
    pub image_f1: f64,
    /// Mean over images.
    pub fpr: f64,
    pub neglog_fpr: f64,
    /// Mean −log FPR over authentic images only.
    pub neglog_fpr_authentic: Option<f64>,
    /// Mean −log FPR over the authentic regions of forged images.
    pub neglog_fpr_forged: Option<f64>,
    /// Mean fraction of pixels predicted positive on authentic images.
    pub authentic_positive_fraction: Option<f64>,
    pub threshold: f64,
    pub auc_mode: AucMode,
    pub n_images: usize,
    pub n_forged: usize,
    pub n_authentic: usize,
}

pub fn report(preds: &[Prediction], opts: &MetricOptions) -> MetricsReport {
    let th = opts.threshold;
    let n = preds.len().max(1) as f64;
    let (pixel_auc, auc_images, auc_note) = match opts.auc_mode {
        AucMode::PerImage => {
            let aucs: Vec<f64> = preds
                .iter()
                .filter_map(|p| pixel_auc(&p.map, &p.mask).ok())
                .collect();
            if aucs.is_empty() {
                (None, 0, Some("no image contains both classes".to_string()))
            } else {
                let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
                (Some(mean), aucs.len(), None)
            }
        }
        AucMode::Pooled => {
            let scores: Vec<f64> = preds.iter().flat_map(|p| p.map.iter().copied()).collect();
            let labels: Vec<bool> = preds.iter().flat_map(|p| p.mask.iter().copied()).collect();
            match pixel_auc(&scores, &labels) {
                Ok(a) => (Some(a), preds.len(), None),
                Err(e) => (None, 0, Some(e.to_string())),
            }
        }
    };
    let pixel_f1 = preds.iter().map(|p| pixel_f1(&p.map, &p.mask, th)).sum::<f64>() / n;
    let (mut fpr, mut neglog) = (0.0, 0.0);
    let (mut by_label, mut counts) = ([0.0; 2], [0usize; 2]);
    for p in preds {
        let (f, l) = fpr_neglog(&p.map, &p.mask, th, opts.log_base);
        fpr += f;
        neglog += l;
        if let Some((_, l)) = fpr_neglog_authentic(&p.map, &p.mask, th, opts.log_base) {
            by_label[p.label as usize] += l;
            counts[p.label as usize] += 1;
        }
    }
    let group_mean = |k: usize| (counts[k] > 0).then(|| by_label[k] / counts[k] as f64);
    let probs: Vec<f64> = preds.iter().map(|p| p.prob).collect();
    let labels: Vec<bool> = preds.iter().map(|p| p.label).collect();
    let authentic: Vec<f64> = preds
        .iter()
        .filter(|p| !p.label)
        .map(|p| p.map.iter().filter(|&&v| v >= th).count() as f64 / p.map.len() as f64)
        .collect();
    let n_forged = labels.iter().filter(|&&l| l).count();
    MetricsReport {
        pixel_auc,
        auc_note,
        auc_images,
        pixel_f1,
        image_f1: image_f1(&probs, &labels, th),
        fpr: fpr / n,
        neglog_fpr: neglog / n,
        neglog_fpr_authentic: group_mean(0),
        neglog_fpr_forged: group_mean(1),
        authentic_positive_fraction: (!authentic.is_empty())
            .then(|| authentic.iter().sum::<f64>() / authentic.len() as f64),
        threshold: th,
        auc_mode: opts.auc_mode,
        n_images: preds.len(),
        n_forged,
        n_authentic: preds.len() - n_forged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(pixel_auc(&[0.0, 1.0, 1.0, 0.0], &[false, true, true, false]).unwrap(), 1.0);
        assert_eq!(pixel_auc(&[0.3; 6], &[false, true, true, false, true, false]).unwrap(), 0.5);
        let got = pixel_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(got, 0.75);
        assert!(pixel_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn f1_examples() {
        let g = [true, true, true, true, false, false];
        assert_eq!(pixel_f1(&[1.0, 1.0, 1.0, 1.0, 0.0, 0.0], &g, 0.5), 1.0);
        let half = pixel_f1(&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0], &g, 0.5);
        assert!((half - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(pixel_f1(&[0.0; 4], &[false; 4], 0.5), 1.0);
        let labels: Vec<bool> = (0..20).map(|i| i % 2 == 0).collect();
        assert!((image_f1(&[0.9; 20], &labels, 0.5) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn fpr_examples() {
        let n = 384 * 384;
        let mask = vec![false; n];
        let (f, l) = fpr_neglog(&vec![0.0; n], &mask, 0.5, LogBase::E);
        assert_eq!(f, 0.0);
        assert!((l - (n as f64).ln()).abs() < 1e-12);
        assert!((l - 11.90).abs() < 0.01);
        let mut pred = vec![0.0; n];
        pred[..7].iter_mut().for_each(|v| *v = 0.9);
        let (f, l) = fpr_neglog(&pred, &mask, 0.5, LogBase::E);
        assert!((f - 4.75e-5).abs() < 1e-7);
        assert!((l - 9.955).abs() < 1e-3);
        let (f, l) = fpr_neglog(&vec![1.0; n], &mask, 0.5, LogBase::E);
        assert_eq!((f, l), (1.0, 0.0));
    }

    #[test]
    fn report_on_ground_truth_is_perfect() {
        let mask: Vec<bool> = (0..64).map(|i| i < 20).collect();
        let preds = vec![
            Prediction {
                map: mask.iter().map(|&m| m as u8 as f64).collect(),
                mask: mask.clone(),
                prob: 1.0,
                label: true,
            },
            Prediction {
                map: vec![0.0; 64],
                mask: vec![false; 64],
                prob: 0.0,
                label: false,
            },
        ];
        let r = report(&preds, &MetricOptions::default());
        assert_eq!(r.pixel_auc, Some(1.0));
        assert_eq!(r.auc_images, 1);
        assert_eq!(r.pixel_f1, 1.0);
        assert_eq!(r.image_f1, 1.0);
        assert_eq!(r.authentic_positive_fraction, Some(0.0));
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"pixel_auc\":1.0"));
    }
}
