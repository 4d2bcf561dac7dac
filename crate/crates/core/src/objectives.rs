//! Losses and metrics: prediction divergence, soft Dice, cross-entropy,
//! Shannon entropy, the weighted feedback objective, and the disc/cup DSC.
//!
//! Probability inputs are `N×K×H×W` tensors whose pixels lie on the K-simplex.
//! Every loss has a `*_with_grad` form returning the gradient with respect to
//! its probability inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::LabelMap;
use crate::tensor::Tensor;

pub const DICE_SMOOTH: f64 = 1e-5;
pub const PROB_FLOOR: f64 = 1e-7;
const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub components: Vec<(String, f64)>,
}

impl LossValue {
    pub fn scalar(name: &str, v: f64) -> Self {
        Self {
            total: v,
            components: vec![(name.to_string(), v)],
        }
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }
}

/// Per-pixel divergence of a stack of predictions (`H×W`, nonnegative).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DivergenceMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

pub fn check_simplex(probs: &Tensor) -> Result<()> {
    let [n, k, _, _] = probs.shape();
    let plane = probs.plane();
    for i in 0..n {
        let item = probs.item(i);
        for p in 0..plane {
            let mut s = 0.0;
            for c in 0..k {
                let v = item[c * plane + p];
                if !(-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(&v) {
                    return Err(Error::Validation(format!("probability {v} outside [0,1]")));
                }
                s += v;
            }
            if (s - 1.0).abs() > SIMPLEX_TOL * k as f64 {
                return Err(Error::Validation(format!("pixel probabilities sum to {s}")));
            }
        }
    }
    Ok(())
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_weight(weight: Option<&[f64]>, probs: &Tensor) -> Result<()> {
    if let Some(w) = weight {
        if w.len() != probs.batch() * probs.plane() {
            return Err(Error::Shape(format!(
                "weight map has {} values, expected {}",
                w.len(),
                probs.batch() * probs.plane()
            )));
        }
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Validation("weights must be finite and nonnegative".into()));
        }
    }
    Ok(())
}

/// Mean over the `N` predictions of the Euclidean distance (across classes)
/// between each prediction and their per-pixel mean. Both averages divide by
/// the prediction count `N`.
/// True when every prediction at pixel `p` is bitwise equal to the first.
fn predictions_agree(preds: &Tensor, p: usize) -> bool {
    let [n, k, h, w] = preds.shape();
    let plane = h * w;
    let first = preds.item(0);
    (1..n).all(|i| {
        let item = preds.item(i);
        (0..k).all(|c| item[c * plane + p] == first[c * plane + p])
    })
}

pub fn divergence_map(preds: &Tensor) -> Result<DivergenceMap> {
    let [n, k, h, w] = preds.shape();
    if n < 2 {
        return Err(Error::UndefinedDivergence(format!(
            "need at least two predictions, got {n}"
        )));
    }
    check_simplex(preds)?;
    let plane = h * w;
    let inv_n = 1.0 / n as f64;
    let mut values = vec![0.0; plane];
    let mut mean = vec![0.0; k];
    for (p, out) in values.iter_mut().enumerate() {
        if predictions_agree(preds, p) {
            continue;
        }
        mean.fill(0.0);
        for i in 0..n {
            let item = preds.item(i);
            for c in 0..k {
                mean[c] += item[c * plane + p] * inv_n;
            }
        }
        let mut acc = 0.0;
        for i in 0..n {
            let item = preds.item(i);
            let mut sq = 0.0;
            for c in 0..k {
                let d = item[c * plane + p] - mean[c];
                sq += d * d;
            }
            acc += sq.sqrt();
        }
        *out = acc * inv_n;
    }
    Ok(DivergenceMap {
        height: h,
        width: w,
        values,
    })
}

/// Pulls a per-pixel upstream gradient on the divergence map back onto the
/// prediction stack. Pixels where a prediction equals the mean contribute a
/// zero subgradient for that prediction.
pub fn divergence_map_backward(preds: &Tensor, upstream: &[f64]) -> Result<Tensor> {
    let [n, k, h, w] = preds.shape();
    let plane = h * w;
    if upstream.len() != plane {
        return Err(Error::Shape("upstream gradient size mismatch".into()));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = Tensor::zeros(preds.shape());
    let mut mean = vec![0.0; k];
    let mut units = vec![0.0; n * k];
    let mut unit_mean = vec![0.0; k];
    for p in 0..plane {
        let up = upstream[p];
        if up == 0.0 || predictions_agree(preds, p) {
            continue;
        }
        mean.fill(0.0);
        for i in 0..n {
            let item = preds.item(i);
            for c in 0..k {
                mean[c] += item[c * plane + p] * inv_n;
            }
        }
        unit_mean.fill(0.0);
        for i in 0..n {
            let item = preds.item(i);
            let mut sq = 0.0;
            for c in 0..k {
                let d = item[c * plane + p] - mean[c];
                units[i * k + c] = d;
                sq += d * d;
            }
            let norm = sq.sqrt();
            for c in 0..k {
                let u = if norm > 0.0 { units[i * k + c] / norm } else { 0.0 };
                units[i * k + c] = u;
                unit_mean[c] += u * inv_n;
            }
        }
        for i in 0..n {
            let g = grad.item_mut(i);
            for c in 0..k {
                g[c * plane + p] += up * inv_n * (units[i * k + c] - unit_mean[c]);
            }
        }
    }
    Ok(grad)
}

/// Spatial mean of the divergence map.
pub fn divergence_loss(map: &DivergenceMap) -> Result<LossValue> {
    if map.values.is_empty() {
        return Err(Error::Validation("empty divergence map".into()));
    }
    Ok(LossValue::scalar("divergence", map.mean()))
}

/// Divergence loss of a prediction stack with its gradient.
pub fn divergence_loss_with_grad(preds: &Tensor) -> Result<(LossValue, DivergenceMap, Tensor)> {
    let map = divergence_map(preds)?;
    let loss = divergence_loss(&map)?;
    let up = vec![1.0 / map.values.len() as f64; map.values.len()];
    let grad = divergence_map_backward(preds, &up)?;
    Ok((loss, map, grad))
}

/// Soft Dice over the foreground classes `1..K`, averaged over classes and
/// batch items. `weight` is an optional `N·H·W` per-pixel map.
pub fn soft_dice_loss_with_grad(
    probs: &Tensor,
    target: &Tensor,
    weight: Option<&[f64]>,
) -> Result<(LossValue, Tensor)> {
    same_shape(probs, target, "dice target")?;
    check_weight(weight, probs)?;
    let [n, k, _, _] = probs.shape();
    if k < 2 {
        return Err(Error::Shape("Dice needs at least one foreground class".into()));
    }
    let plane = probs.plane();
    let classes = (k - 1) as f64;
    let scale = 1.0 / (classes * n as f64);
    let mut total = 0.0;
    let mut grad = Tensor::zeros(probs.shape());
    for i in 0..n {
        let p = probs.item(i);
        let t = target.item(i);
        let w = weight.map(|w| &w[i * plane..(i + 1) * plane]);
        let g = grad.item_mut(i);
        for c in 1..k {
            let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
            for px in 0..plane {
                let wi = w.map_or(1.0, |w| w[px]);
                let idx = c * plane + px;
                inter += wi * p[idx] * t[idx];
                sp += wi * p[idx];
                st += wi * t[idx];
            }
            let num = 2.0 * inter + DICE_SMOOTH;
            let den = sp + st + DICE_SMOOTH;
            total += (1.0 - num / den) * scale;
            for px in 0..plane {
                let wi = w.map_or(1.0, |w| w[px]);
                let idx = c * plane + px;
                let dd = (2.0 * wi * t[idx] * den - num * wi) / (den * den);
                g[idx] = -dd * scale;
            }
        }
    }
    Ok((LossValue::scalar("dice", total), grad))
}

pub fn soft_dice_loss(probs: &Tensor, target: &Tensor, weight: Option<&[f64]>) -> Result<LossValue> {
    soft_dice_loss_with_grad(probs, target, weight).map(|(v, _)| v)
}

/// Weighted mean over all pixels of `−log p(true class)`, probabilities
/// clipped below at [`PROB_FLOOR`]; weights are normalized by their sum.
pub fn cross_entropy_loss_with_grad(
    probs: &Tensor,
    target: &Tensor,
    weight: Option<&[f64]>,
) -> Result<(LossValue, Tensor)> {
    same_shape(probs, target, "cross-entropy target")?;
    check_weight(weight, probs)?;
    let [n, k, _, _] = probs.shape();
    let plane = probs.plane();
    let wsum = weight.map_or((n * plane) as f64, |w| w.iter().sum());
    if wsum <= 0.0 {
        return Err(Error::Validation("cross-entropy weights sum to zero".into()));
    }
    let mut total = 0.0;
    let mut grad = Tensor::zeros(probs.shape());
    for i in 0..n {
        let p = probs.item(i);
        let t = target.item(i);
        let g = grad.item_mut(i);
        for px in 0..plane {
            let wi = weight.map_or(1.0, |w| w[i * plane + px]) / wsum;
            for c in 0..k {
                let idx = c * plane + px;
                if t[idx] == 0.0 {
                    continue;
                }
                let pc = p[idx].max(PROB_FLOOR);
                total -= wi * t[idx] * pc.ln();
                if p[idx] > PROB_FLOOR {
                    g[idx] = -wi * t[idx] / p[idx];
                }
            }
        }
    }
    Ok((LossValue::scalar("ce", total), grad))
}

pub fn cross_entropy_loss(
    probs: &Tensor,
    target: &Tensor,
    weight: Option<&[f64]>,
) -> Result<LossValue> {
    cross_entropy_loss_with_grad(probs, target, weight).map(|(v, _)| v)
}

/// Per-pixel Shannon entropy `−Σ p log p` of item `n`.
pub fn entropy_map(probs: &Tensor, n: usize) -> Vec<f64> {
    let k = probs.channels();
    let plane = probs.plane();
    let item = probs.item(n);
    (0..plane)
        .map(|px| {
            -(0..k)
                .map(|c| {
                    let v = item[c * plane + px];
                    if v > 0.0 {
                        v * v.ln()
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
        })
        .collect()
}

/// Spatial (and batch) mean of the per-pixel entropy.
pub fn prediction_entropy_with_grad(probs: &Tensor) -> Result<(LossValue, Tensor)> {
    check_simplex(probs)?;
    let [n, k, _, _] = probs.shape();
    let plane = probs.plane();
    let scale = 1.0 / (n * plane) as f64;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(probs.shape());
    for i in 0..n {
        total += entropy_map(probs, i).iter().sum::<f64>() * scale;
        let p = probs.item(i);
        let g = grad.item_mut(i);
        for c in 0..k {
            for px in 0..plane {
                let idx = c * plane + px;
                g[idx] = -(p[idx].max(1e-300).ln() + 1.0) * scale;
            }
        }
    }
    Ok((LossValue::scalar("entropy", total), grad))
}

pub fn prediction_entropy(probs: &Tensor) -> Result<LossValue> {
    prediction_entropy_with_grad(probs).map(|(v, _)| v)
}

/// Feedback objective and its gradients with respect to both heads.
#[derive(Debug, Clone)]
pub struct FeedbackLoss {
    pub value: LossValue,
    pub grad_main: Tensor,
    pub grad_pref: Tensor,
}

/// `Dice(ỹ,y;w) + CE(ỹ,y;w) + Dice(ŷ,y;w) + CE(ŷ,y;w)` for an explicit
/// per-pixel weight map `w`.
pub fn feedback_loss_weighted(
    y_hat: &Tensor,
    y_tilde: &Tensor,
    y: &Tensor,
    weight: &[f64],
) -> Result<FeedbackLoss> {
    same_shape(y_hat, y_tilde, "feedback heads")?;
    let (dice_p, gd_p) = soft_dice_loss_with_grad(y_tilde, y, Some(weight))?;
    let (ce_p, gc_p) = cross_entropy_loss_with_grad(y_tilde, y, Some(weight))?;
    let (dice_m, gd_m) = soft_dice_loss_with_grad(y_hat, y, Some(weight))?;
    let (ce_m, gc_m) = cross_entropy_loss_with_grad(y_hat, y, Some(weight))?;
    let mut grad_pref = gd_p;
    grad_pref.add_assign(&gc_p);
    let mut grad_main = gd_m;
    grad_main.add_assign(&gc_m);
    let components = vec![
        ("dice_pref".to_string(), dice_p.total),
        ("ce_pref".to_string(), ce_p.total),
        ("dice_main".to_string(), dice_m.total),
        ("ce_main".to_string(), ce_m.total),
    ];
    Ok(FeedbackLoss {
        value: LossValue {
            total: components.iter().map(|(_, v)| v).sum(),
            components,
        },
        grad_main,
        grad_pref,
    })
}

/// Feedback objective weighted by `1 + M_div`. Without a divergence map the
/// call fails unless `allow_unweighted`, in which case `w = 1`.
pub fn feedback_loss(
    y_hat: &Tensor,
    y_tilde: &Tensor,
    y: &Tensor,
    mdiv: Option<&DivergenceMap>,
    allow_unweighted: bool,
) -> Result<FeedbackLoss> {
    let plane = y_hat.batch() * y_hat.plane();
    let weight: Vec<f64> = match mdiv {
        Some(m) => {
            if m.values.len() * y_hat.batch() != plane {
                return Err(Error::Shape("divergence map does not match predictions".into()));
            }
            (0..y_hat.batch())
                .flat_map(|_| m.values.iter().map(|v| 1.0 + v))
                .collect()
        }
        None if allow_unweighted => vec![1.0; plane],
        None => {
            return Err(Error::Validation(
                "feedback loss requires a divergence map".into(),
            ))
        }
    };
    feedback_loss_weighted(y_hat, y_tilde, y, &weight)
}

/// Disc, cup, and mean Dice similarity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DscScores {
    pub od: f64,
    pub oc: f64,
    pub mean: f64,
}

fn binary_dsc(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut sa, mut sb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        sa += x as usize;
        sb += y as usize;
    }
    if sa + sb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (sa + sb) as f64
    }
}

/// `2|A∩B|/(|A|+|B|)` for the disc (`label ≥ 1`) and cup (`label = 2`);
/// two empty regions score 1.
pub fn dsc(pred: &LabelMap, gt: &LabelMap) -> Result<DscScores> {
    if !pred.same_shape(gt) {
        return Err(Error::Shape("DSC masks differ in size".into()));
    }
    let od = binary_dsc(&pred.disc(), &gt.disc());
    let oc = binary_dsc(&pred.cup(), &gt.cup());
    Ok(DscScores {
        od,
        oc,
        mean: 0.5 * (od + oc),
    })
}
