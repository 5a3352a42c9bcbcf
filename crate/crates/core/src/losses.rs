//! Tversky index, focal Tversky loss and the joint 2D/3D objective.
//!
//! Predictions are probability maps `[n, c, spatial...]`; ground truth is a
//! binary map of the same shape (one-hot for several classes, see
//! [`one_hot`]). Every loss is also available with its gradient with
//! respect to the prediction so it can terminate a training graph.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of false negatives.
    pub alpha: f64,
    /// Weight of false positives.
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    /// Weight of the slice term in the joint objective.
    pub lambda2d: f64,
    /// Count channel 0 as a class in multi-class tasks.
    pub include_background: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 0.7, beta: 0.3, gamma: 4.0 / 3.0, epsilon: 1e-8, lambda2d: 0.2, include_background: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if (self.alpha + self.beta - 1.0).abs() > 1e-9 {
            v.push(format!("alpha + beta must equal 1 (got {} + {})", self.alpha, self.beta));
        }
        if !(self.epsilon > 0.0) {
            v.push(format!("epsilon must be positive (got {})", self.epsilon));
        }
        if !(self.gamma > 0.0) {
            v.push(format!("gamma must be positive (got {})", self.gamma));
        }
        if !(self.lambda2d >= 0.0) {
            v.push(format!("lambda2d must be non-negative (got {})", self.lambda2d));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

/// Training objective choices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    FocalTversky,
    Dice,
    DiceCe,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "focal_tversky" => Ok(LossKind::FocalTversky),
            "dice" => Ok(LossKind::Dice),
            "dice_ce" => Ok(LossKind::DiceCe),
            other => Err(Error::Config(format!("unknown loss `{other}` (focal_tversky, dice, dice_ce)"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::FocalTversky => "focal_tversky",
            LossKind::Dice => "dice",
            LossKind::DiceCe => "dice_ce",
        })
    }
}

/// One-hot encodes a label map `[n, 1, spatial...]` into `[n, k, spatial...]`.
pub fn one_hot<S: Scalar>(labels: &Tensor<S>, num_classes: usize) -> Result<Tensor<S>> {
    if labels.rank() < 3 || labels.channels() != 1 {
        return Err(Error::Shape(format!("label maps must be [n, 1, ...], got {:?}", labels.shape())));
    }
    if num_classes == 1 {
        return Ok(labels.clone());
    }
    let n = labels.batch();
    let p: usize = labels.spatial().iter().product();
    let mut shape = labels.shape().to_vec();
    shape[1] = num_classes;
    let mut out = Tensor::zeros(&shape);
    for b in 0..n {
        for i in 0..p {
            let v = labels.data()[b * p + i].to_f64();
            let k = v.round();
            if k < 0.0 || k >= num_classes as f64 || (v - k).abs() > 1e-6 {
                return Err(Error::Domain(format!("label {v} outside 0..{num_classes}")));
            }
            out.data_mut()[(b * num_classes + k as usize) * p + i] = S::one();
        }
    }
    Ok(out)
}

fn check_inputs<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("prediction {:?} and ground truth {:?} differ", pred.shape(), gt.shape())));
    }
    if pred.rank() < 3 {
        return Err(Error::Shape(format!("loss inputs must be [n, c, spatial...], got {:?}", pred.shape())));
    }
    if let Some(v) = pred.data().iter().find(|v| !(v.to_f64() >= 0.0 && v.to_f64() <= 1.0)) {
        return Err(Error::Domain(format!("prediction value {v} outside [0, 1]")));
    }
    if let Some(v) = gt.data().iter().find(|v| v.to_f64() != 0.0 && v.to_f64() != 1.0) {
        return Err(Error::Domain(format!("ground truth value {v} is not binary")));
    }
    Ok(())
}

fn classes(c: usize, cfg: &LossConfig) -> std::ops::Range<usize> {
    if c > 1 && !cfg.include_background {
        1..c
    } else {
        0..c
    }
}

/// Sums `(sum p g, sum (1-p) g, sum p (1-g))` of channel `ch` over the
/// selected batch items.
fn tversky_sums<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>, ch: usize, items: std::ops::Range<usize>) -> (f64, f64, f64) {
    let c = pred.channels();
    let p: usize = pred.spatial().iter().product();
    let (mut a, mut b, mut cc) = (0.0, 0.0, 0.0);
    for n in items {
        let off = (n * c + ch) * p;
        for (&pv, &gv) in pred.data()[off..off + p].iter().zip(&gt.data()[off..off + p]) {
            let (pv, gv) = (pv.to_f64(), gv.to_f64());
            a += pv * gv;
            b += (1.0 - pv) * gv;
            cc += pv * (1.0 - gv);
        }
    }
    (a, b, cc)
}

fn ti_from_sums(a: f64, b: f64, c: f64, cfg: &LossConfig) -> f64 {
    (a + cfg.epsilon) / (a + cfg.alpha * b + cfg.beta * c + cfg.epsilon)
}

/// Tversky index per counted class, pooling all batch items and pixels.
pub fn tversky_index<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>, cfg: &LossConfig) -> Result<Vec<f64>> {
    check_inputs(pred, gt)?;
    Ok(classes(pred.channels(), cfg)
        .map(|ch| {
            let (a, b, c) = tversky_sums(pred, gt, ch, 0..pred.batch());
            ti_from_sums(a, b, c, cfg)
        })
        .collect())
}

/// `(1 - TI)^(1/gamma)` with TI clamped to `[eps, 1]`, and its derivative
/// with respect to TI (zero where the clamp is active).
fn focal(ti: f64, cfg: &LossConfig) -> (f64, f64) {
    let t = ti.clamp(cfg.epsilon, 1.0);
    let q = 1.0 - t;
    let e = 1.0 / cfg.gamma;
    if q <= 0.0 || t != ti {
        return (q.max(0.0).powf(e), 0.0);
    }
    (q.powf(e), -e * q.powf(e - 1.0))
}

/// Focal Tversky loss and its gradient over the batch items in `items`.
/// The gradient is written into `grad` scaled by `weight`.
fn focal_tversky_items<S: Scalar>(
    pred: &Tensor<S>,
    gt: &Tensor<S>,
    cfg: &LossConfig,
    items: std::ops::Range<usize>,
    weight: f64,
    grad: Option<&mut Tensor<S>>,
) -> f64 {
    let c = pred.channels();
    let p: usize = pred.spatial().iter().product();
    let mut total = 0.0;
    let mut grad = grad;
    for ch in classes(c, cfg) {
        let (a, b, cc) = tversky_sums(pred, gt, ch, items.clone());
        let num = a + cfg.epsilon;
        let den = a + cfg.alpha * b + cfg.beta * cc + cfg.epsilon;
        let (l, dl_dti) = focal(num / den, cfg);
        total += l;
        if let Some(g) = grad.as_deref_mut() {
            if dl_dti == 0.0 {
                continue;
            }
            let scale = weight * dl_dti / (den * den);
            for n in items.clone() {
                let off = (n * c + ch) * p;
                for i in off..off + p {
                    let gv = gt.data()[i].to_f64();
                    let dden = gv - cfg.alpha * gv + cfg.beta * (1.0 - gv);
                    g.data_mut()[i] += S::from_f64(scale * (gv * den - num * dden));
                }
            }
        }
    }
    total
}

/// `sum_c (1 - TI_c)^(1/gamma)` over all pixels of all batch items.
pub fn focal_tversky_loss<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>, cfg: &LossConfig) -> Result<f64> {
    check_inputs(pred, gt)?;
    Ok(focal_tversky_items(pred, gt, cfg, 0..pred.batch(), 1.0, None))
}

pub fn focal_tversky_with_grad<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>, cfg: &LossConfig) -> Result<(f64, Tensor<S>)> {
    check_inputs(pred, gt)?;
    let mut g = Tensor::zeros(pred.shape());
    let l = focal_tversky_items(pred, gt, cfg, 0..pred.batch(), 1.0, Some(&mut g));
    Ok((l, g))
}

/// Mean over batch items of the per-item focal Tversky loss.
pub fn focal_tversky_item_mean_with_grad<S: Scalar>(
    pred: &Tensor<S>,
    gt: &Tensor<S>,
    cfg: &LossConfig,
) -> Result<(f64, Tensor<S>)> {
    check_inputs(pred, gt)?;
    let n = pred.batch();
    let mut g = Tensor::zeros(pred.shape());
    let w = 1.0 / n as f64;
    let total: f64 = (0..n).map(|i| focal_tversky_items(pred, gt, cfg, i..i + 1, w, Some(&mut g))).sum();
    Ok((total * w, g))
}

/// Per-item focal Tversky losses.
pub fn focal_tversky_per_item<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>, cfg: &LossConfig) -> Result<Vec<f64>> {
    check_inputs(pred, gt)?;
    Ok((0..pred.batch()).map(|i| focal_tversky_items(pred, gt, cfg, i..i + 1, 1.0, None)).collect())
}

/// Focal Tversky loss over slices `[n, c, h, w]`.
pub fn loss_2d<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>, cfg: &LossConfig) -> Result<f64> {
    if pred.rank() != 4 {
        return Err(Error::Shape(format!("2D loss expects [n, c, h, w], got {:?}", pred.shape())));
    }
    focal_tversky_loss(pred, gt, cfg)
}

/// Focal Tversky loss over volumes `[n, c, s, h, w]`.
pub fn loss_3d<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>, cfg: &LossConfig) -> Result<f64> {
    if pred.rank() != 5 {
        return Err(Error::Shape(format!("3D loss expects [n, c, s, h, w], got {:?}", pred.shape())));
    }
    focal_tversky_loss(pred, gt, cfg)
}

/// `lambda * mean(slice losses) + volume loss`.
pub fn joint_objective(l2d_per_slice: &[f64], l3d: f64, cfg: &LossConfig) -> Result<f64> {
    if l2d_per_slice.is_empty() {
        return Err(Error::Contract("joint objective needs at least one slice loss".into()));
    }
    let mean = l2d_per_slice.iter().sum::<f64>() / l2d_per_slice.len() as f64;
    Ok(cfg.lambda2d * mean + l3d)
}

/// `sum_c 1 - (2 sum pg + eps) / (sum p + sum g + eps)` and its gradient.
pub fn dice_loss_with_grad<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>, cfg: &LossConfig) -> Result<(f64, Tensor<S>)> {
    check_inputs(pred, gt)?;
    let (n, c) = (pred.batch(), pred.channels());
    let p: usize = pred.spatial().iter().product();
    let mut g = Tensor::zeros(pred.shape());
    let mut total = 0.0;
    for ch in classes(c, cfg) {
        let (mut i_, mut sp, mut sg) = (0.0, 0.0, 0.0);
        for b in 0..n {
            let off = (b * c + ch) * p;
            for i in off..off + p {
                let (pv, gv) = (pred.data()[i].to_f64(), gt.data()[i].to_f64());
                i_ += pv * gv;
                sp += pv;
                sg += gv;
            }
        }
        let num = 2.0 * i_ + cfg.epsilon;
        let den = sp + sg + cfg.epsilon;
        total += 1.0 - num / den;
        for b in 0..n {
            let off = (b * c + ch) * p;
            for i in off..off + p {
                let gv = gt.data()[i].to_f64();
                g.data_mut()[i] = S::from_f64(-(2.0 * gv * den - num) / (den * den));
            }
        }
    }
    Ok((total, g))
}

/// Dice loss plus mean cross-entropy (binary for one channel, categorical
/// otherwise).
pub fn dice_ce_loss_with_grad<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>, cfg: &LossConfig) -> Result<(f64, Tensor<S>)> {
    let (dl, mut g) = dice_loss_with_grad(pred, gt, cfg)?;
    let m = pred.numel() / pred.channels();
    let binary = pred.channels() == 1;
    let lo = 1e-7;
    let mut ce = 0.0;
    for (i, (&pv, &gv)) in pred.data().iter().zip(gt.data()).enumerate() {
        let (pv, gv) = (pv.to_f64().clamp(lo, 1.0 - lo), gv.to_f64());
        let (l, d) = if binary {
            (-(gv * pv.ln() + (1.0 - gv) * (1.0 - pv).ln()), -(gv / pv) + (1.0 - gv) / (1.0 - pv))
        } else {
            (-gv * pv.ln(), -gv / pv)
        };
        ce += l;
        g.data_mut()[i] += S::from_f64(d / m as f64);
    }
    Ok((dl + ce / m as f64, g))
}

/// Loss of the given kind with its gradient. Focal Tversky pools all pixels
/// of the batch.
pub fn loss_with_grad<S: Scalar>(
    kind: LossKind,
    pred: &Tensor<S>,
    gt: &Tensor<S>,
    cfg: &LossConfig,
) -> Result<(f64, Tensor<S>)> {
    match kind {
        LossKind::FocalTversky => focal_tversky_with_grad(pred, gt, cfg),
        LossKind::Dice => dice_loss_with_grad(pred, gt, cfg),
        LossKind::DiceCe => dice_ce_loss_with_grad(pred, gt, cfg),
    }
}
