//! Multi-task detection losses: binomial logistic classification and
//! smooth-L1 box regression for the proposal network and the region heads,
//! plus the weighted context-classifier combination.

use crate::anchors::{AnchorLabel, MatchResult, RegressionTarget};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Weights of the face, context and joint classifier losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|v| !(*v >= 0.0)) || w.iter().all(|&v| v == 0.0) {
            return Err(Error::Validation(format!("loss weights {w:?} must be >= 0 and not all zero")));
        }
        Ok(())
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// `-label ln p - (1 - label) ln(1 - p)`.
pub fn binary_class_loss(prob_pos: f64, label: bool) -> f64 {
    let p = clamp_prob(prob_pos);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Derivative of [`binary_class_loss`] with respect to `prob_pos`.
pub fn binary_class_loss_grad(prob_pos: f64, label: bool) -> f64 {
    let p = clamp_prob(prob_pos);
    if label {
        -1.0 / p
    } else {
        1.0 / (1.0 - p)
    }
}

pub fn smooth_l1_loss(diff: f64) -> f64 {
    if diff.abs() < 1.0 {
        0.5 * diff * diff
    } else {
        diff.abs() - 0.5
    }
}

pub fn smooth_l1_grad(diff: f64) -> f64 {
    if diff.abs() < 1.0 {
        diff
    } else {
        diff.signum()
    }
}

/// Classification and regression terms of one loss, with gradients with
/// respect to the probability and regression inputs.
#[derive(Clone, Debug)]
pub struct TermsWithGrad {
    pub cls: f64,
    pub reg: f64,
    pub grad_probs: Tensor,
    pub grad_reg: Tensor,
}

impl TermsWithGrad {
    pub fn total(&self) -> f64 {
        self.cls + self.reg
    }
}

/// Proposal-network loss over the sampled anchors.
///
/// `probs` is `[1, 2A, gh, gw]` (softmaxed `(background, object)` pairs per
/// scale) and `reg` is `[1, 4A, gh, gw]`; anchor `i` is `(row * gw + col) * A + a`.
/// Classification is averaged over `sampled`; regression over the sampled
/// positives only.
pub fn rpn_loss(probs: &Tensor, reg: &Tensor, m: &MatchResult, sampled: &[usize]) -> Result<TermsWithGrad> {
    if sampled.is_empty() {
        return Err(Error::Degenerate("rpn loss over zero sampled anchors".into()));
    }
    let (_, c2, gh, gw) = probs.nchw()?;
    let (_, c4, rh, rw) = reg.nchw()?;
    let a = c2 / 2;
    if c2 % 2 != 0 || c4 != 4 * a || (rh, rw) != (gh, gw) || m.labels.len() != gh * gw * a {
        return Err(shape_err!(
            "rpn loss: probs {:?}, reg {:?}, {} anchors",
            probs.dims(),
            reg.dims(),
            m.labels.len()
        ));
    }
    let plane = gh * gw;
    let loc = |i: usize| (i / a, i % a);
    let mut grad_probs = Tensor::zeros_like(probs);
    let mut grad_reg = Tensor::zeros_like(reg);
    let n_cls = sampled.len() as f64;
    let positives: Vec<usize> = sampled
        .iter()
        .copied()
        .filter(|&i| m.labels[i] == AnchorLabel::Positive)
        .collect();
    let n_pos = positives.len().max(1) as f64;

    let mut cls = 0.0;
    for &i in sampled {
        let label = match m.labels[i] {
            AnchorLabel::Positive => true,
            AnchorLabel::Negative => false,
            AnchorLabel::Ignore => return Err(Error::Param(format!("anchor {i} is ignored but was sampled"))),
        };
        let (cell, s) = loc(i);
        let idx = (2 * s + 1) * plane + cell;
        let p = probs.data()[idx];
        cls += binary_class_loss(p, label);
        grad_probs.data_mut()[idx] += binary_class_loss_grad(p, label) / n_cls;
    }
    let mut reg_loss = 0.0;
    for &i in &positives {
        let t = m.targets[i].ok_or_else(|| Error::Param(format!("positive anchor {i} has no target")))?;
        let (cell, s) = loc(i);
        for (k, tv) in t.as_array().into_iter().enumerate() {
            let idx = (4 * s + k) * plane + cell;
            let d = reg.data()[idx] - tv;
            reg_loss += smooth_l1_loss(d);
            grad_reg.data_mut()[idx] += smooth_l1_grad(d) / n_pos;
        }
    }
    Ok(TermsWithGrad {
        cls: cls / n_cls,
        reg: reg_loss / n_pos,
        grad_probs,
        grad_reg,
    })
}

/// Region-head loss for a batch of `n` sampled proposals: `probs` is `[R, 2]`,
/// `reg` is `[R, 4]`. Both terms are normalized by `n`; regression counts
/// positive proposals only.
pub fn head_loss(
    probs: &Tensor,
    reg: &Tensor,
    labels: &[bool],
    targets: &[Option<RegressionTarget>],
    n: usize,
) -> Result<TermsWithGrad> {
    if n == 0 {
        return Err(Error::Degenerate("head loss with N = 0".into()));
    }
    let r = labels.len();
    if probs.dims() != [r, 2] || reg.dims() != [r, 4] || targets.len() != r {
        return Err(shape_err!("head loss: probs {:?}, reg {:?}, {r} labels", probs.dims(), reg.dims()));
    }
    let nf = n as f64;
    let mut grad_probs = Tensor::zeros_like(probs);
    let mut grad_reg = Tensor::zeros_like(reg);
    let mut cls = 0.0;
    let mut reg_loss = 0.0;
    for (row, &label) in labels.iter().enumerate() {
        let p = probs.data()[2 * row + 1];
        cls += binary_class_loss(p, label);
        grad_probs.data_mut()[2 * row + 1] = binary_class_loss_grad(p, label) / nf;
        if !label {
            continue;
        }
        let t = targets[row].ok_or_else(|| Error::Param(format!("positive proposal {row} has no target")))?;
        for (k, tv) in t.as_array().into_iter().enumerate() {
            let d = reg.data()[4 * row + k] - tv;
            reg_loss += smooth_l1_loss(d);
            grad_reg.data_mut()[4 * row + k] = smooth_l1_grad(d) / nf;
        }
    }
    Ok(TermsWithGrad {
        cls: cls / nf,
        reg: reg_loss / nf,
        grad_probs,
        grad_reg,
    })
}

/// `alpha * face + beta * context + gamma * joint`.
pub fn composite_context_loss(face: f64, context: f64, joint: f64, w: &LossWeights) -> f64 {
    w.alpha * face + w.beta * context + w.gamma * joint
}

pub fn total_loss(rpn: f64, cl: f64) -> f64 {
    rpn + cl
}

/// Per-branch classifier losses of a context head.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ContextTerms {
    pub face: f64,
    pub context: f64,
    pub joint: f64,
}

/// Loss components of one training iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    /// Classifier terms after the context weighting, when a context head exists.
    pub head_cls: f64,
    pub head_reg: f64,
    pub context: Option<ContextTerms>,
    pub total: f64,
    /// Classifier batch size summed over detection branches.
    pub n: usize,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.rpn_cls, self.rpn_reg, self.head_cls, self.head_reg, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn csv_line(&self, iter: usize) -> String {
        format!(
            "{iter},{},{},{},{},{}",
            self.rpn_cls, self.rpn_reg, self.head_cls, self.head_reg, self.total
        )
    }
}
