//! Heatmap training loss: focal terms for the classification channels and
//! smooth L1 for the regressions, plus a finite-difference gradient check.

use serde::{Deserialize, Serialize};

use crate::codec::RotationHeatmap;
use crate::error::{NgsError, Result};

/// Probabilities are clamped to `[FOCAL_EPS, 1 - FOCAL_EPS]`.
pub const FOCAL_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS)
}

pub fn focal_loss(p: f64, positive: bool, alpha: f64, gamma_f: f64) -> f64 {
    let p = clamp_prob(p);
    if positive {
        -alpha * (1.0 - p).powf(gamma_f) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma_f) * (1.0 - p).ln()
    }
}

/// Derivative of [`focal_loss`] with respect to `p`, inside the clamp range.
pub fn focal_grad(p: f64, positive: bool, alpha: f64, gamma_f: f64) -> f64 {
    let p = clamp_prob(p);
    if positive {
        let q = 1.0 - p;
        alpha * (gamma_f * q.powf(gamma_f - 1.0) * p.ln() - q.powf(gamma_f) / p)
    } else {
        let q = 1.0 - p;
        -(1.0 - alpha) * (gamma_f * p.powf(gamma_f - 1.0) * q.ln() - p.powf(gamma_f) / q)
    }
}

pub fn smooth_l1(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a <= delta {
        x * x / (2.0 * delta)
    } else {
        a - delta / 2.0
    }
}

pub fn smooth_l1_grad(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        x / delta
    } else {
        x.signum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub theta_cls: f64,
    pub theta_reg: f64,
    pub gamma_beta: f64,
    pub translation: f64,
    pub width: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { theta_cls: 1.0, theta_reg: 1.0, gamma_beta: 1.0, translation: 1.0, width: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub theta_cls: f64,
    pub theta_reg: f64,
    pub gamma_beta: f64,
    pub translation: f64,
    pub width: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub focal: FocalParams,
    pub delta: f64,
    pub weights: LossWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { focal: FocalParams::default(), delta: 1.0, weights: LossWeights::default() }
    }
}

/// Loss of `pred` against `target` with default settings.
pub fn total_loss(pred: &RotationHeatmap, target: &RotationHeatmap) -> Result<LossBreakdown> {
    total_loss_with(pred, target, &LossConfig::default())
}

/// A target cell is positive when its graspable value is at least 0.5.
///
/// The graspable channel is averaged over all cells and the theta classes
/// over every (positive cell, theta anchor) entry. Regression terms are
/// summed over positive cells; translation sums the three offset axes.
pub fn total_loss_with(pred: &RotationHeatmap, target: &RotationHeatmap, cfg: &LossConfig) -> Result<LossBreakdown> {
    if !pred.same_shape(target) || pred.cells.len() != target.cells.len() {
        return Err(NgsError::Config(format!(
            "heatmap shapes differ: {}x{}x{} vs {}x{}x{}",
            pred.n_gamma, pred.n_beta, pred.n_theta, target.n_gamma, target.n_beta, target.n_theta
        )));
    }
    if !(cfg.delta > 0.0) {
        return Err(NgsError::Config(format!("smooth L1 delta must be positive, got {}", cfg.delta)));
    }
    let FocalParams { alpha, gamma } = cfg.focal;
    let mut out = LossBreakdown::default();
    let mut theta_entries = 0usize;
    for (p, t) in pred.cells.iter().zip(&target.cells) {
        let positive = t.graspable >= 0.5;
        out.gamma_beta += focal_loss(p.graspable, positive, alpha, gamma);
        if !positive {
            continue;
        }
        for (ps, ts) in p.theta_scores.iter().zip(&t.theta_scores) {
            out.theta_cls += focal_loss(*ps, *ts >= 0.5, alpha, gamma);
            theta_entries += 1;
        }
        out.theta_reg += smooth_l1(p.theta_residual - t.theta_residual, cfg.delta);
        out.width += smooth_l1(p.width - t.width, cfg.delta);
        out.translation += (0..3).map(|a| smooth_l1(p.offset[a] - t.offset[a], cfg.delta)).sum::<f64>();
    }
    if !target.cells.is_empty() {
        out.gamma_beta /= target.cells.len() as f64;
    }
    if theta_entries > 0 {
        out.theta_cls /= theta_entries as f64;
    }
    let w = cfg.weights;
    out.total = w.theta_cls * out.theta_cls
        + w.theta_reg * out.theta_reg
        + w.gamma_beta * out.gamma_beta
        + w.translation * out.translation
        + w.width * out.width;
    Ok(out)
}

/// Largest relative error between `grad` and central differences of `f`
/// at `x`. Each entry compares `|a - n| / max(|a|, |n|)`; two exact zeros
/// count as agreement.
pub fn grad_check<F: Fn(&[f64]) -> f64>(f: F, grad: &[f64], x: &[f64], eps: f64) -> f64 {
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let hi = f(&probe);
        probe[i] = x[i] - eps;
        let lo = f(&probe);
        probe[i] = x[i];
        let numeric = (hi - lo) / (2.0 * eps);
        let scale = grad[i].abs().max(numeric.abs());
        if scale > 0.0 {
            worst = worst.max((grad[i] - numeric).abs() / scale);
        }
    }
    worst
}
