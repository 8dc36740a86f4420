//! Focal classification, L1 and generalized-IoU box losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{log_sigmoid, sigmoid};
use crate::autodiff::{CustomOp, Var};
use crate::backbone::{BBox, TrackOutput};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const FOCAL_GAMMA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_cls: f64,
    pub w_l1: f64,
    pub w_giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_cls: 1.0,
            w_l1: 5.0,
            w_giou: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_cls, self.w_l1, self.w_giou];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) || all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config(format!(
                "loss weights {all:?} must be nonnegative, not all zero"
            )));
        }
        Ok(())
    }
}

/// Binary focal loss over `[n, 1]` logits with a single positive token,
/// normalized by the positive count.
struct FocalLoss {
    positive: usize,
    gamma: f64,
}

impl FocalLoss {
    fn value<S: Scalar>(&self, z: &[S]) -> S {
        let g = S::lit(self.gamma);
        z.iter()
            .enumerate()
            .map(|(i, &zi)| {
                let p = sigmoid(zi);
                if i == self.positive {
                    -(S::one() - p).powf(g) * log_sigmoid(zi)
                } else {
                    -p.powf(g) * log_sigmoid(-zi)
                }
            })
            .sum()
    }
}

impl<S: Scalar> CustomOp<S> for FocalLoss {
    fn name(&self) -> &'static str {
        "focal_loss"
    }

    fn backward(&self, inputs: &[&[S]], _output: &[S], grad_out: &[S]) -> Vec<Vec<S>> {
        let g = S::lit(self.gamma);
        let one = S::one();
        let dz = inputs[0]
            .iter()
            .enumerate()
            .map(|(i, &z)| {
                let p = sigmoid(z);
                let q = one - p;
                let d = if i == self.positive {
                    g * p * q.powf(g) * log_sigmoid(z) - q.powf(g + one)
                } else {
                    -g * p.powf(g) * q * log_sigmoid(-z) + p.powf(g + one)
                };
                d * grad_out[0]
            })
            .collect();
        vec![dz]
    }
}

pub fn focal_loss<'t, S: Scalar>(
    logits: Var<'t, S>,
    positive: usize,
    gamma: f64,
) -> Result<Var<'t, S>> {
    let n = logits.value().len();
    if positive >= n {
        return Err(Error::shape(format!(
            "positive token {positive} outside {n} logits"
        )));
    }
    let op = FocalLoss { positive, gamma };
    let v = op.value(&logits.value());
    logits.tape().custom(&[logits], &[1], vec![v], Box::new(op))
}

/// `min(a, c)` and `max(a, c)` against a constant.
fn min_c<'t, S: Scalar>(a: Var<'t, S>, c: f64) -> Var<'t, S> {
    a.sub(a.add_scalar(S::lit(-c)).relu()).expect("same dims")
}

fn max_c<'t, S: Scalar>(a: Var<'t, S>, c: f64) -> Var<'t, S> {
    a.add(a.scale(-S::one()).add_scalar(S::lit(c)).relu())
        .expect("same dims")
}

/// Generalized IoU of a predicted `[1, 4]` box against a constant box.
pub fn giou<'t, S: Scalar>(pred: Var<'t, S>, truth: &BBox) -> Result<Var<'t, S>> {
    if pred.dims() != [1, 4] {
        return Err(Error::shape(format!(
            "expected a [1,4] box, got {:?}",
            pred.dims()
        )));
    }
    let half = S::lit(0.5);
    let (cx, cy) = (pred.slice_cols(0, 1)?, pred.slice_cols(1, 2)?);
    let (w, h) = (pred.slice_cols(2, 3)?, pred.slice_cols(3, 4)?);
    let (ax0, ax1) = (cx.sub(w.scale(half))?, cx.add(w.scale(half))?);
    let (ay0, ay1) = (cy.sub(h.scale(half))?, cy.add(h.scale(half))?);
    let (bx0, by0, bx1, by1) = truth.corners();
    let iw = min_c(ax1, bx1).sub(max_c(ax0, bx0))?.relu();
    let ih = min_c(ay1, by1).sub(max_c(ay0, by0))?.relu();
    let inter = iw.mul(ih)?;
    let union = w
        .mul(h)?
        .add_scalar(S::lit((bx1 - bx0) * (by1 - by0)))
        .sub(inter)?;
    let hw = max_c(ax1, bx1).sub(min_c(ax0, bx0))?;
    let hh = max_c(ay1, by1).sub(min_c(ay0, by0))?;
    let hull = hw.mul(hh)?;
    let iou = inter.div(union)?;
    iou.sub(hull.sub(union)?.div(hull)?)
}

/// Loss terms before weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
}

/// `w_cls·focal + w_l1·L1 + w_giou·(1 − GIoU)` at the positive token.
pub fn tracking_loss<'t, S: Scalar>(
    out: &TrackOutput<'t, S>,
    truth: &BBox,
    positive: usize,
    weights: &LossWeights,
) -> Result<(Var<'t, S>, LossParts)> {
    if !(truth.w > 0.0 && truth.h > 0.0 && truth.w.is_finite() && truth.h.is_finite()) {
        return Err(Error::Domain(format!("degenerate truth box {truth:?}")));
    }
    let tape = out.scores.tape();
    let focal = focal_loss(out.scores, positive, FOCAL_GAMMA)?;
    let pred = out.boxes.slice_rows(positive, positive + 1)?;
    let target = tape.constant_from(
        &[1, 4],
        [truth.cx, truth.cy, truth.w, truth.h]
            .iter()
            .map(|&v| S::lit(v))
            .collect(),
    )?;
    let l1 = pred.sub(target)?.abs().mean();
    let g = giou(pred, truth)?.reshape(&[1])?;
    let total = focal
        .scale(S::lit(weights.w_cls))
        .add(l1.scale(S::lit(weights.w_l1)))?
        .add(
            g.scale(S::lit(-weights.w_giou))
                .add_scalar(S::lit(weights.w_giou)),
        )?;
    let parts = LossParts {
        focal: focal.scalar().to_f64_lossy(),
        l1: l1.scalar().to_f64_lossy(),
        giou: g.scalar().to_f64_lossy(),
        total: total.scalar().to_f64_lossy(),
    };
    Ok((total, parts))
}
