//! Training objectives.
//!
//! - image level: cross-entropy on each item's set-label confidence, weighted
//!   by constant per-item weights and normalised by their sum;
//! - set level: contrastive loss on every unordered pair of fused set
//!   embeddings in the batch, averaged over pairs;
//! - the joint objective is a weighted sum of the two (plain sum by default).
//!
//! Each loss exists twice: a graph builder used in training and a plain
//! `f64` evaluation used for checks and reporting.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// `log s` is evaluated as `log(max(s, LOG_FLOOR))`.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub wcel: f64,
    pub cl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { wcel: 1.0, cl: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub margin: f64,
    pub weights: LossWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 1.2,
            weights: LossWeights::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(Error::Config(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        let w = self.weights;
        if !(w.wcel >= 0.0 && w.cl >= 0.0) || !w.wcel.is_finite() || !w.cl.is_finite() {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn check_confidences(values: impl Iterator<Item = f64>) -> Result<()> {
    for s in values {
        if !(s >= 0.0) || !s.is_finite() || s > 1.0 {
            return Err(Error::Domain(format!("confidence {s} outside [0, 1]")));
        }
    }
    Ok(())
}

fn check_item_weights(n: usize, weights: &[f64]) -> Result<()> {
    if n == 0 {
        return Err(Error::dim("weighted_cross_entropy", "no items"));
    }
    if weights.len() != n {
        return Err(Error::dim(
            "weighted_cross_entropy",
            format!("{n} confidences, {} weights", weights.len()),
        ));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Domain(
            "item weights must be finite and non-negative".into(),
        ));
    }
    Ok(())
}

/// `-sum(w_i log s_i) / sum(w_i)` with constant weights.
///
/// The gradient with respect to `s_i` is `-(w_i / sum(w)) / s_i`.
pub fn weighted_cross_entropy(g: &mut Graph, confidences: &[Var], weights: &[f64]) -> Result<Var> {
    check_item_weights(confidences.len(), weights)?;
    check_confidences(confidences.iter().map(|&s| g.value(s).item()))?;
    let logs: Vec<Var> = confidences
        .iter()
        .map(|&s| g.log_floored(s, LOG_FLOOR))
        .collect();
    let avg = g.weighted_mean(&logs, weights)?;
    Ok(g.scale(avg, -1.0))
}

/// Unweighted mean cross-entropy `-mean(log s_i)`.
pub fn cross_entropy(g: &mut Graph, confidences: &[Var]) -> Result<Var> {
    if confidences.is_empty() {
        return Err(Error::dim("cross_entropy", "no items"));
    }
    check_confidences(confidences.iter().map(|&s| g.value(s).item()))?;
    let logs: Vec<Var> = confidences
        .iter()
        .map(|&s| g.log_floored(s, LOG_FLOOR))
        .collect();
    let avg = g.mean_of(&logs)?;
    Ok(g.scale(avg, -1.0))
}

pub fn weighted_cross_entropy_value(confidences: &[f64], weights: &[f64]) -> Result<f64> {
    check_item_weights(confidences.len(), weights)?;
    check_confidences(confidences.iter().copied())?;
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate(format!("weight total {total}")));
    }
    let num: f64 = confidences
        .iter()
        .zip(weights)
        .map(|(s, w)| w * s.max(LOG_FLOOR).ln())
        .sum();
    Ok(-(num / total))
}

fn check_pair(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::dim("contrastive_pair", format!("{a} vs {b}")));
    }
    Ok(())
}

/// `y d^2 + (1 - y) max(0, margin - d)^2` with `d = ||a - b||`.
pub fn contrastive_pair(g: &mut Graph, a: Var, b: Var, same_id: bool, margin: f64) -> Result<Var> {
    check_pair(g.value(a).len(), g.value(b).len())?;
    let diff = g.sub(a, b)?;
    if same_id {
        let sq = g.square(diff);
        Ok(g.sum(sq))
    } else {
        let d = g.l2_norm(diff);
        let gap = g.affine(d, -1.0, margin);
        let hinge = g.relu(gap);
        Ok(g.square(hinge))
    }
}

pub fn contrastive_pair_value(a: &[f64], b: &[f64], same_id: bool, margin: f64) -> Result<f64> {
    check_pair(a.len(), b.len())?;
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    if same_id {
        Ok(sq)
    } else {
        let hinge = (margin - sq.sqrt()).max(0.0);
        Ok(hinge * hinge)
    }
}

/// Unordered index pairs `(j, k)`, `j < k`, in row-major order.
pub fn set_pairs(m: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..m).flat_map(move |j| (j + 1..m).map(move |k| (j, k)))
}

fn check_batch(m: usize, labels: usize) -> Result<()> {
    if m != labels {
        return Err(Error::dim(
            "batch_contrastive",
            format!("{m} sets, {labels} labels"),
        ));
    }
    if m < 2 {
        return Err(Error::dim(
            "batch_contrastive",
            format!("needs at least 2 sets, got {m}"),
        ));
    }
    Ok(())
}

/// Mean contrastive loss over all `m (m - 1) / 2` set pairs.
pub fn batch_contrastive(
    g: &mut Graph,
    sets: &[Var],
    labels: &[usize],
    margin: f64,
) -> Result<Var> {
    check_batch(sets.len(), labels.len())?;
    let pair_losses = set_pairs(sets.len())
        .map(|(j, k)| contrastive_pair(g, sets[j], sets[k], labels[j] == labels[k], margin))
        .collect::<Result<Vec<_>>>()?;
    g.mean_of(&pair_losses)
}

pub fn batch_contrastive_value(sets: &[Vec<f64>], labels: &[usize], margin: f64) -> Result<f64> {
    check_batch(sets.len(), labels.len())?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (j, k) in set_pairs(sets.len()) {
        total += contrastive_pair_value(&sets[j], &sets[k], labels[j] == labels[k], margin)?;
        count += 1;
    }
    Ok(total / count as f64)
}

/// `w_wcel * wcel + w_cl * cl`.
pub fn joint_loss(g: &mut Graph, wcel: Var, cl: Var, weights: LossWeights) -> Result<Var> {
    let a = g.scale(wcel, weights.wcel);
    let b = g.scale(cl, weights.cl);
    g.add(a, b)
}

pub fn joint_loss_value(wcel: f64, cl: f64, weights: LossWeights) -> f64 {
    weights.wcel * wcel + weights.cl * cl
}
