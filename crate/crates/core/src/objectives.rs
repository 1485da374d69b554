//! Losses, boundary ground truth, evaluation metrics and plain SGD.

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{resize_nearest, DepthMap};
use crate::layers::Graph;
use crate::model::{ForwardOptions, Level, LevelVars, Model, PredictionSet};
use crate::tensor::Tensor;

/// Predictions are clamped to `[BCE_CLAMP, 1 − BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

/// β² of the F-measure.
pub const F_BETA2: f64 = 0.3;

/// Number of uniform thresholds `i/255` swept by [`max_f`].
pub const F_THRESHOLDS: usize = 256;

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    if a.is_empty() {
        return Err(Error::Contract(format!("{op} on an empty map")));
    }
    Ok(())
}

/// Mean binary cross-entropy of `pred` against `gt`.
pub fn bce_value(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_same("bce", pred, gt)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

pub(crate) fn bce_grad(pred: &Tensor, gt: &Tensor, dy: f64) -> Vec<f64> {
    let n = pred.len() as f64;
    pred.data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                0.0
            } else {
                dy * (p - g) / (p * (1.0 - p)) / n
            }
        })
        .collect()
}

pub fn bce(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    bce_value(pred, gt)
}

/// Which groups of terms enter the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerms {
    pub dense: bool,
    pub token: bool,
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms {
        dense: true,
        token: true,
    };
    pub const DENSE_ONLY: LossTerms = LossTerms {
        dense: true,
        token: false,
    };
    pub const TOKEN_ONLY: LossTerms = LossTerms {
        dense: false,
        token: true,
    };
}

impl Default for LossTerms {
    fn default() -> Self {
        LossTerms::ALL
    }
}

/// Binary saliency target and its derived boundary target.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub saliency: Tensor,
    pub boundary: Tensor,
}

impl GroundTruth {
    pub fn new(saliency: Tensor) -> Result<Self> {
        let boundary = boundary_gt(&saliency)?;
        Ok(GroundTruth { saliency, boundary })
    }

    /// Nearest-neighbour downsampling of both maps to `grid`.
    pub fn at_grid(&self, grid: (usize, usize)) -> Result<(Tensor, Tensor)> {
        Ok((
            resize_nearest(&self.saliency, grid)?,
            resize_nearest(&self.boundary, grid)?,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelLoss {
    pub level: Level,
    pub dense_saliency: f64,
    pub token_saliency: f64,
    pub dense_boundary: f64,
    pub token_boundary: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub levels: Vec<LevelLoss>,
    pub saliency: f64,
    pub boundary: f64,
    pub total: f64,
}

impl LossReport {
    fn from_levels(levels: Vec<LevelLoss>) -> Self {
        let saliency: f64 = levels
            .iter()
            .map(|l| l.dense_saliency + l.token_saliency)
            .sum();
        let boundary: f64 = levels
            .iter()
            .map(|l| l.dense_boundary + l.token_boundary)
            .sum();
        LossReport {
            levels,
            saliency,
            boundary,
            total: saliency + boundary,
        }
    }

    /// The individual terms in level order, four per level.
    pub fn components(&self) -> Vec<f64> {
        self.levels
            .iter()
            .flat_map(|l| {
                [
                    l.dense_saliency,
                    l.token_saliency,
                    l.dense_boundary,
                    l.token_boundary,
                ]
            })
            .collect()
    }
}

/// Sum of the dense and token-supervised BCE terms over every level.
pub fn total_loss(preds: &PredictionSet, gt: &GroundTruth, terms: LossTerms) -> Result<LossReport> {
    let mut levels = Vec::with_capacity(preds.levels.len());
    for p in &preds.levels {
        let (gs, gb) = gt.at_grid(p.grid)?;
        let term = |on: bool, m: &Tensor, g: &Tensor| if on { bce_value(m, g) } else { Ok(0.0) };
        levels.push(LevelLoss {
            level: p.level,
            dense_saliency: term(terms.dense, &p.dense_saliency, &gs)?,
            token_saliency: term(terms.token, &p.token_saliency, &gs)?,
            dense_boundary: term(terms.dense, &p.dense_boundary, &gb)?,
            token_boundary: term(terms.token, &p.token_boundary, &gb)?,
        });
    }
    Ok(LossReport::from_levels(levels))
}

/// Differentiable total loss over recorded level outputs.
pub fn total_loss_var<'t>(
    levels: &[LevelVars<'t>],
    gt: &GroundTruth,
    terms: LossTerms,
) -> Result<Var<'t>> {
    let mut parts = Vec::new();
    for l in levels {
        let (gs, gb) = gt.at_grid(l.grid)?;
        if terms.dense {
            parts.push(l.dense_saliency.bce(&gs)?);
            parts.push(l.dense_boundary.bce(&gb)?);
        }
        if terms.token {
            parts.push(l.token_saliency.bce(&gs)?);
            parts.push(l.token_boundary.bce(&gb)?);
        }
    }
    let mut it = parts.into_iter();
    let first = it
        .next()
        .ok_or_else(|| Error::Contract("loss has no active terms".into()))?;
    it.try_fold(first, |acc, v| acc.add(v))
}

fn require_binary(op: &str, map: &Tensor) -> Result<()> {
    if map.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Contract(format!("{op} expects a binary map")));
    }
    Ok(())
}

/// Boundary target: Sobel gradient magnitude (replicate border) of a binary
/// map, binarized at strictly greater than zero.
pub fn boundary_gt(saliency: &Tensor) -> Result<Tensor> {
    let (h, w) = saliency.as_matrix("boundary_gt")?;
    require_binary("boundary_gt", saliency)?;
    let at = |i: isize, j: isize| {
        let i = i.clamp(0, h as isize - 1) as usize;
        let j = j.clamp(0, w as isize - 1) as usize;
        saliency.get(i, j)
    };
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h as isize {
        for j in 0..w as isize {
            let gx = (at(i - 1, j + 1) + 2.0 * at(i, j + 1) + at(i + 1, j + 1))
                - (at(i - 1, j - 1) + 2.0 * at(i, j - 1) + at(i + 1, j - 1));
            let gy = (at(i + 1, j - 1) + 2.0 * at(i + 1, j) + at(i + 1, j + 1))
                - (at(i - 1, j - 1) + 2.0 * at(i - 1, j) + at(i - 1, j + 1));
            out.push(if gx.hypot(gy) > 0.0 { 1.0 } else { 0.0 });
        }
    }
    Tensor::new([h, w], out)
}

pub fn mae(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_same("mae", pred, gt)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| (p - g).abs())
        .sum();
    Ok(s / pred.len() as f64)
}

fn f_measure(tp: usize, predicted: usize, positives: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / predicted as f64;
    let r = tp as f64 / positives as f64;
    (1.0 + F_BETA2) * p * r / (F_BETA2 * p + r)
}

/// Maximum F-measure over the thresholds `i/255`, `i = 0..=255`, with a
/// pixel predicted positive when strictly above the threshold.
pub fn max_f(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_same("max_f", pred, gt)?;
    require_binary("max_f", gt)?;
    let positives = gt.data().iter().filter(|&&g| g == 1.0).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric(
            "ground truth has no positive pixel".into(),
        ));
    }
    let mut pairs: Vec<(f64, bool)> = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (p, g == 1.0))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));

    // Thresholds descend, so the predicted-positive prefix only grows.
    let mut best = 0.0f64;
    let (mut predicted, mut tp) = (0, 0);
    for i in (0..F_THRESHOLDS).rev() {
        let t = i as f64 / (F_THRESHOLDS - 1) as f64;
        while predicted < pairs.len() && pairs[predicted].0 > t {
            tp += usize::from(pairs[predicted].1);
            predicted += 1;
        }
        best = best.max(f_measure(tp, predicted, positives));
    }
    Ok(best)
}

/// One forward, backward and SGD update on a single image; returns the
/// loss before the update.
pub fn train_step(
    model: &mut Model,
    rgb: &Tensor,
    depth: Option<&DepthMap>,
    gt: &GroundTruth,
    terms: LossTerms,
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = {
        let tape = Tape::new();
        let g = Graph::new(&tape, &model.store);
        let fv = model.forward_on(&g, rgb, depth, &ForwardOptions::default())?;
        let loss = total_loss_var(&fv.levels, gt, terms)?;
        (loss.value().item()?, tape.gradients(loss)?)
    };
    model.store.accumulate(&grads);
    sgd_step(&mut model.store, lr);
    Ok(loss)
}

/// `p ← p − lr·grad` for every parameter, then clears the gradients.
pub fn sgd_step(params: &mut ParamStore, lr: f64) {
    for p in params.iter_mut() {
        if lr != 0.0 {
            let grad = &p.grad;
            p.value = p
                .value
                .zip_map(grad, "sgd_step", |v, g| v - lr * g)
                .expect("gradient shape matches its parameter");
        }
        p.reset_grad();
    }
}
