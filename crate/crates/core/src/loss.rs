//! Token-level training losses: cross-entropy and the closed-form
//! Wasserstein-p distance between a degenerate target and a predicted
//! categorical distribution over ordered value tokens.
//!
//! With the ground metric `D(i, j) = r * |i - j|` and all target mass on
//! token `a`, the optimal coupling is forced and
//!
//! ```text
//! W_p = r * (sum_i p_i * |i - a|^p)^(1/p)
//! ```
//!
//! All gradients are taken with respect to the logits, through the softmax.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Guard added inside the root of the raw-mode gradient.
pub const RAW_MODE_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerMode {
    /// `r * S^(1/p)`, the distance itself.
    Raw,
    /// `r^p * S`, same per-sample minimizer and no singularity at zero.
    PthPower,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Wasserstein { p: f64, mode: PowerMode },
}

impl LossKind {
    pub const W1: LossKind = LossKind::Wasserstein {
        p: 1.0,
        mode: PowerMode::PthPower,
    };
    pub const W2: LossKind = LossKind::Wasserstein {
        p: 2.0,
        mode: PowerMode::PthPower,
    };

    /// Parses `ce`, `w1` or `w2`; `raw` selects the un-powered Wasserstein
    /// objective.
    pub fn from_name(name: &str, raw: bool) -> Result<Self> {
        let mode = if raw { PowerMode::Raw } else { PowerMode::PthPower };
        match name.to_ascii_lowercase().as_str() {
            "ce" => Ok(LossKind::CrossEntropy),
            "w1" => Ok(LossKind::Wasserstein { p: 1.0, mode }),
            "w2" => Ok(LossKind::Wasserstein { p: 2.0, mode }),
            other => Err(Error::Config(format!(
                "unknown loss '{other}', expected one of ce, w1, w2"
            ))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            LossKind::CrossEntropy => "ce".into(),
            LossKind::Wasserstein { p, .. } if *p == 1.0 => "w1".into(),
            LossKind::Wasserstein { p, .. } if *p == 2.0 => "w2".into(),
            LossKind::Wasserstein { p, .. } => format!("w{p}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LossKind::Wasserstein { p, .. } if !(p.is_finite() && *p >= 1.0) => {
                Err(Error::Config(format!("wasserstein order p must be >= 1, got {p}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::from_name(s, false)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Vec<f64>,
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    crate::error::check_finite(logits)?;
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

fn check_target(target: usize, len: usize) -> Result<()> {
    if target >= len {
        return Err(Error::TokenOutOfRange { token: target, limit: len });
    }
    Ok(())
}

pub fn cross_entropy(logits: &[f64], target: usize) -> Result<LossOutput> {
    check_target(target, logits.len())?;
    let mut grad = softmax(logits)?;
    let value = log_sum_exp(logits) - logits[target];
    grad[target] -= 1.0;
    Ok(LossOutput {
        value: value.max(0.0),
        grad,
    })
}

/// `|i - a|^p` with exact integer arithmetic for the common orders.
fn distance_power(i: usize, target: usize, p: f64) -> f64 {
    let w = i.abs_diff(target) as f64;
    if p == 1.0 {
        w
    } else if p == 2.0 {
        w * w
    } else {
        w.powf(p)
    }
}

fn root(s: f64, p: f64) -> f64 {
    if p == 1.0 {
        s
    } else if p == 2.0 {
        s.sqrt()
    } else {
        s.powf(1.0 / p)
    }
}

fn check_order(p: f64, r: f64) -> Result<()> {
    if !(p.is_finite() && p >= 1.0) {
        return Err(Error::Config(format!("wasserstein order p must be >= 1, got {p}")));
    }
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::Config(format!("grid spacing r must be > 0, got {r}")));
    }
    Ok(())
}

/// Raw Wasserstein-p distance between the degenerate distribution at
/// `target` and `probs`, on a lattice with spacing `r`.
pub fn wasserstein_distance(probs: &[f64], target: usize, p: f64, r: f64) -> Result<f64> {
    check_order(p, r)?;
    check_target(target, probs.len())?;
    let moment: f64 = probs
        .iter()
        .enumerate()
        .map(|(i, &pi)| pi * distance_power(i, target, p))
        .sum();
    Ok(r * root(moment, p))
}

pub fn wasserstein_loss(
    logits: &[f64],
    target: usize,
    p: f64,
    r: f64,
    mode: PowerMode,
) -> Result<LossOutput> {
    check_order(p, r)?;
    check_target(target, logits.len())?;
    let probs = softmax(logits)?;
    let weights: Vec<f64> = (0..probs.len())
        .map(|i| distance_power(i, target, p))
        .collect();
    let moment: f64 = probs.iter().zip(&weights).map(|(pi, wi)| pi * wi).sum();

    // d moment / d z_j = p_j * (w_j - moment)
    let moment_grad = probs.iter().zip(&weights).map(|(pj, wj)| pj * (wj - moment));
    match mode {
        PowerMode::PthPower => {
            let rp = distance_scale(r, p);
            Ok(LossOutput {
                value: rp * moment,
                grad: moment_grad.map(|g| rp * g).collect(),
            })
        }
        PowerMode::Raw => {
            let value = r * root(moment, p);
            let grad = if moment == 0.0 {
                vec![0.0; probs.len()]
            } else {
                let outer = r / p * (moment + RAW_MODE_EPSILON).powf(1.0 / p - 1.0);
                moment_grad.map(|g| outer * g).collect()
            };
            Ok(LossOutput { value, grad })
        }
    }
}

fn distance_scale(r: f64, p: f64) -> f64 {
    if p == 1.0 {
        r
    } else if p == 2.0 {
        r * r
    } else {
        r.powf(p)
    }
}

/// Exact 1-D Wasserstein-1 distance between two distributions on the same
/// lattice, via the area between their CDFs. Independent of the closed form
/// above, which only handles a degenerate side.
pub fn w1_oracle(probs_p: &[f64], probs_q: &[f64], r: f64) -> Result<f64> {
    if probs_p.len() != probs_q.len() {
        return Err(Error::Shape(format!(
            "distributions have different supports: {} vs {}",
            probs_p.len(),
            probs_q.len()
        )));
    }
    for probs in [probs_p, probs_q] {
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || probs.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::NotNormalized { sum });
        }
    }
    let mut cdf_p = 0.0;
    let mut cdf_q = 0.0;
    let mut area = 0.0;
    for (a, b) in probs_p.iter().zip(probs_q).take(probs_p.len().saturating_sub(1)) {
        cdf_p += a;
        cdf_q += b;
        area += (cdf_p - cdf_q).abs();
    }
    Ok(r * area)
}

/// A loss bound to a vocabulary: the first `value_tokens` logits are ordinal
/// value tokens, anything after them is a non-ordinal special token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenLoss {
    pub kind: LossKind,
    pub r: f64,
    pub value_tokens: usize,
}

impl TokenLoss {
    pub fn new(kind: LossKind, r: f64, value_tokens: usize) -> Result<Self> {
        kind.validate()?;
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::Config(format!("grid spacing r must be > 0, got {r}")));
        }
        if value_tokens == 0 {
            return Err(Error::Config("no value tokens".into()));
        }
        Ok(TokenLoss { kind, r, value_tokens })
    }

    /// Loss for one position. Wasserstein losses only see the value-token
    /// logits (special logits get zero gradient); special targets fall back
    /// to cross-entropy over the whole row.
    pub fn row(&self, logits: &[f64], target: usize) -> Result<LossOutput> {
        if logits.len() < self.value_tokens {
            return Err(Error::Shape(format!(
                "logit row of length {} is shorter than the {} value tokens",
                logits.len(),
                self.value_tokens
            )));
        }
        match self.kind {
            LossKind::Wasserstein { p, mode } if target < self.value_tokens => {
                let out = wasserstein_loss(&logits[..self.value_tokens], target, p, self.r, mode)?;
                let mut grad = out.grad;
                grad.resize(logits.len(), 0.0);
                Ok(LossOutput { value: out.value, grad })
            }
            _ => cross_entropy(logits, target),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLossOutput {
    pub value: f64,
    pub grad: Array2<f64>,
    /// Number of positions that contributed to the mean.
    pub count: usize,
}

/// Mean loss over the unmasked rows of `logits` (`mask[t] == true` keeps the
/// row). The gradient of masked rows is zero. Rows are reduced in order, so
/// the result is bit-identical across runs.
pub fn batch_loss(
    logits: ArrayView2<'_, f64>,
    targets: &[usize],
    mask: &[bool],
    loss: &TokenLoss,
) -> Result<BatchLossOutput> {
    let (rows, cols) = logits.dim();
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::Shape(format!(
            "{rows} logit rows, {} targets, {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::AllMasked);
    }
    let norm = 1.0 / count as f64;
    let mut grad = Array2::<f64>::zeros((rows, cols));
    let mut total = 0.0;
    for (t, row) in logits.outer_iter().enumerate() {
        if !mask[t] {
            continue;
        }
        let row = row.to_vec();
        let out = loss.row(&row, targets[t])?;
        total += out.value;
        for (g, o) in grad.row_mut(t).iter_mut().zip(&out.grad) {
            *g = o * norm;
        }
    }
    Ok(BatchLossOutput {
        value: total * norm,
        grad,
        count,
    })
}
