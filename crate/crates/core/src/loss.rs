//! Training objective: image-level BCE plus Dice and focal losses on the
//! localization map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Float, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocalVariant {
    Plain,
    /// Below the threshold the modulating factor is dropped (plain
    /// log-loss); above it the factor is `((1 − p_t) / th)^γ`, which is
    /// continuous at `p_t = th = 0.5`.
    Reduced,
}

/// How the Dice loss of a batch is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceReduction {
    /// Mean of one Dice loss per image.
    PerImage,
    /// One Dice loss over all pixels of the batch.
    Batch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub w_cls: f64,
    pub w_dice: f64,
    pub w_focal: f64,
    /// Weight of a per-pixel BCE term on the map (off by default).
    pub w_pixel_bce: f64,
    pub gamma: f64,
    pub eps: f64,
    pub alpha: f64,
    pub focal: FocalVariant,
    pub threshold: f64,
    pub dice_reduction: DiceReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_cls: 1.0,
            w_dice: 1.10,
            w_focal: 1.15,
            w_pixel_bce: 0.0,
            gamma: 2.0,
            eps: 1e-7,
            alpha: 1.0,
            focal: FocalVariant::Reduced,
            threshold: 0.5,
            dice_reduction: DiceReduction::Batch,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.w_cls, self.w_dice, self.w_focal, self.w_pixel_bce, self.alpha];
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights and alpha must be ≥ 0".into()));
        }
        if !(self.gamma >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config("gamma must be ≥ 0 and eps > 0".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("focal threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

fn check_same<T: Float>(op: &'static str, p: &Tensor<T>, g: &Tensor<T>) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: p.shape().to_vec(),
            rhs: g.shape().to_vec(),
        });
    }
    Ok(())
}

/// Clamped value and whether the clamp was inactive (gradient passes).
fn clamp(p: f64, eps: f64) -> (f64, bool) {
    if p < eps {
        (eps, false)
    } else if p > 1.0 - eps {
        (1.0 - eps, false)
    } else {
        (p, true)
    }
}

/// Mean binary cross-entropy of probabilities against 0/1 targets.
pub fn bce<T: Float>(pred: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<f64> {
    check_same("bce_loss", pred, target)?;
    let n = pred.numel() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            let (p, y) = (clamp(p.f64(), eps).0, y.f64());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n)
}

/// Soft Dice loss `−ln((2 Σ P·G + ε) / (Σ P + Σ G + ε))` of one map.
pub fn dice<T: Float>(pred: &[T], target: &[T], eps: f64) -> f64 {
    let (i, s) = dice_sums(pred, target);
    -((2.0 * i + eps) / (s + eps)).ln()
}

fn dice_sums<T: Float>(pred: &[T], target: &[T]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut total = 0.0;
    for (&p, &g) in pred.iter().zip(target) {
        inter += p.f64() * g.f64();
        total += p.f64() + g.f64();
    }
    (inter, total)
}

/// Focal term and its derivative with respect to `p_t` (unclamped part).
fn focal_term(pt: f64, cfg: &LossConfig) -> (f64, f64) {
    let (g, a) = (cfg.gamma, cfg.alpha);
    let log = pt.ln();
    let (m, dm) = match cfg.focal {
        FocalVariant::Reduced if pt < cfg.threshold => (1.0, 0.0),
        FocalVariant::Reduced => {
            let th = cfg.threshold.powf(g);
            ((1.0 - pt).powf(g) / th, modulator_slope(pt, g) / th)
        }
        FocalVariant::Plain => ((1.0 - pt).powf(g), modulator_slope(pt, g)),
    };
    (-a * m * log, -a * (dm * log + m / pt))
}

/// d/dp (1 − p)^γ.
fn modulator_slope(p: f64, g: f64) -> f64 {
    if g == 0.0 {
        0.0
    } else {
        -g * (1.0 - p).powf(g - 1.0)
    }
}

/// Mean focal loss over all pixels.
pub fn focal<T: Float>(pred: &Tensor<T>, target: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    check_same("focal_loss", pred, target)?;
    let n = pred.numel() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            let p = clamp(p.f64(), cfg.eps).0;
            let pt = if y.f64() > 0.5 { p } else { 1.0 - p };
            focal_term(pt, cfg).0
        })
        .sum::<f64>()
        / n)
}

struct BceOp {
    target: Tensor<f64>,
    eps: f64,
}

impl<T: Float> CustomOp<T> for BceOp {
    fn name(&self) -> &'static str {
        "bce_loss"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Ok(Tensor::scalar(T::of(bce(inputs[0], &self.target.cast(), self.eps)?)))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let p = inputs[0];
        let scale = grad.item().f64() / p.numel() as f64;
        let data = p
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(&p, &y)| {
                let (p, live) = clamp(p.f64(), self.eps);
                if !live {
                    return T::zero();
                }
                T::of(-scale * (y / p - (1.0 - y) / (1.0 - p)))
            })
            .collect();
        vec![Some(Tensor::new(p.shape(), data).expect("same shape"))]
    }
}

/// Dice loss of an N×C×H×W batch, per image or pooled.
struct DiceOp {
    target: Tensor<f64>,
    eps: f64,
    reduction: DiceReduction,
}

impl DiceOp {
    /// Elements per Dice group.
    fn group(&self) -> usize {
        match self.reduction {
            DiceReduction::PerImage => self.target.numel() / self.target.shape()[0],
            DiceReduction::Batch => self.target.numel(),
        }
    }
}

impl<T: Float> CustomOp<T> for DiceOp {
    fn name(&self) -> &'static str {
        "dice_loss"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let p = inputs[0];
        check_same("dice_loss", p, &self.target.cast::<T>())?;
        let m = self.group();
        let n = (p.numel() / m) as f64;
        let total: f64 = p
            .data()
            .chunks(m)
            .zip(self.target.data().chunks(m))
            .map(|(pp, gg)| {
                let gg: Vec<T> = gg.iter().map(|&v| T::of(v)).collect();
                dice(pp, &gg, self.eps)
            })
            .sum();
        Ok(Tensor::scalar(T::of(total / n)))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let p = inputs[0];
        let m = self.group();
        let scale = grad.item().f64() / (p.numel() / m) as f64;
        let mut out = Vec::with_capacity(p.numel());
        for (pp, gg) in p.data().chunks(m).zip(self.target.data().chunks(m)) {
            let (mut inter, mut total) = (0.0, 0.0);
            for (&a, &b) in pp.iter().zip(gg) {
                inter += a.f64() * b;
                total += a.f64() + b;
            }
            let (a, b) = (2.0 * inter + self.eps, total + self.eps);
            out.extend(gg.iter().map(|&g| T::of(scale * (1.0 / b - 2.0 * g / a))));
        }
        vec![Some(Tensor::new(p.shape(), out).expect("same shape"))]
    }
}

struct FocalOp {
    target: Tensor<f64>,
    cfg: LossConfig,
}

impl<T: Float> CustomOp<T> for FocalOp {
    fn name(&self) -> &'static str {
        "focal_loss"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Ok(Tensor::scalar(T::of(focal(inputs[0], &self.target.cast(), &self.cfg)?)))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let p = inputs[0];
        let scale = grad.item().f64() / p.numel() as f64;
        let data = p
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(&p, &y)| {
                let (p, live) = clamp(p.f64(), self.cfg.eps);
                if !live {
                    return T::zero();
                }
                let positive = y > 0.5;
                let pt = if positive { p } else { 1.0 - p };
                let d = focal_term(pt, &self.cfg).1;
                T::of(scale * if positive { d } else { -d })
            })
            .collect();
        vec![Some(Tensor::new(p.shape(), data).expect("same shape"))]
    }
}

pub fn bce_loss<T: Float>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
    check_same("bce_loss", g.value(pred), target)?;
    g.custom(Box::new(BceOp { target: target.cast(), eps }), &[pred])
}

pub fn dice_loss<T: Float>(
    g: &mut Graph<T>,
    pred: Var,
    target: &Tensor<T>,
    eps: f64,
    reduction: DiceReduction,
) -> Result<Var> {
    check_same("dice_loss", g.value(pred), target)?;
    let op = DiceOp {
        target: target.cast(),
        eps,
        reduction,
    };
    g.custom(Box::new(op), &[pred])
}

pub fn focal_loss<T: Float>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>, cfg: &LossConfig) -> Result<Var> {
    check_same("focal_loss", g.value(pred), target)?;
    g.custom(
        Box::new(FocalOp {
            target: target.cast(),
            cfg: cfg.clone(),
        }),
        &[pred],
    )
}

/// Loss value and its unweighted components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub dice: f64,
    pub focal: f64,
    pub pixel_bce: f64,
    pub total: f64,
}

/// `w_c·BCE(class) + w_d·Dice(map) + w_f·Focal(map)`, plus a pixel BCE
/// term when its weight is non-zero.
pub fn combined_loss<T: Float>(
    g: &mut Graph<T>,
    class_prob: Var,
    class_label: &Tensor<T>,
    map: Var,
    mask: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<(Var, LossParts)> {
    let c = bce_loss(g, class_prob, class_label, cfg.eps)?;
    let d = dice_loss(g, map, mask, cfg.eps, cfg.dice_reduction)?;
    let f = focal_loss(g, map, mask, cfg)?;
    let mut parts = LossParts {
        cls: g.value(c).item().f64(),
        dice: g.value(d).item().f64(),
        focal: g.value(f).item().f64(),
        ..LossParts::default()
    };
    let wc = g.scale(c, cfg.w_cls);
    let wd = g.scale(d, cfg.w_dice);
    let wf = g.scale(f, cfg.w_focal);
    let total = g.add(wc, wd)?;
    let mut total = g.add(total, wf)?;
    if cfg.w_pixel_bce > 0.0 {
        let b = bce_loss(g, map, mask, cfg.eps)?;
        parts.pixel_bce = g.value(b).item().f64();
        let wb = g.scale(b, cfg.w_pixel_bce);
        total = g.add(total, wb)?;
    }
    let parts = LossParts {
        total: g.value(total).item().f64(),
        ..parts
    };
    Ok((total, parts))
}
