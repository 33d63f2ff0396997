//! ID-aware quality and the two attention transforms built on it.
//!
//! An item's quality `s` is the softmax confidence of its embedding for the
//! label of the set it belongs to. Feature learning attention (FLA) is a
//! Gaussian of `s` centred at 0.5; feature fusion attention (FFA) is a
//! Gaussian centred at 1. The medium-hard fusion variant (FFA_MH) reuses the
//! FFA temperature with the 0.5 centre.
//!
//! All weights produced here are plain numbers: callers feed them into the
//! graph as constants, so no gradient ever flows through them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::softmax;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Weight totals below this are treated as degenerate in fusion.
pub const FUSION_EPSILON: f64 = 1e-12;

/// Denominator of the Gaussian exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaussianDenominator {
    /// `exp(-(s - mu)^2 / sigma^2)`
    #[default]
    SigmaSq,
    /// `exp(-(s - mu)^2 / (2 sigma^2))`
    TwoSigmaSq,
}

impl GaussianDenominator {
    fn factor(self) -> f64 {
        match self {
            GaussianDenominator::SigmaSq => 1.0,
            GaussianDenominator::TwoSigmaSq => 2.0,
        }
    }
}

/// How item embeddings are fused into a set embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Average,
    Ffa,
    FfaMh,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Average, FusionMode::Ffa, FusionMode::FfaMh];

    /// Per-item fusion weights for the given confidences.
    pub fn weights(self, confidences: &[f64], config: &AttentionConfig) -> Result<Vec<f64>> {
        confidences
            .iter()
            .map(|&s| match self {
                FusionMode::Average => Ok(1.0),
                FusionMode::Ffa => ffa_score_with(s, config.sigma_ffa, config.gaussian_denominator),
                FusionMode::FfaMh => {
                    ffa_mh_score_with(s, config.sigma_ffa, config.gaussian_denominator)
                }
            })
            .collect()
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Average => "average",
            FusionMode::Ffa => "ffa",
            FusionMode::FfaMh => "ffa_mh",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(FusionMode::Average),
            "ffa" => Ok(FusionMode::Ffa),
            "ffa_mh" => Ok(FusionMode::FfaMh),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub sigma_fla: f64,
    pub sigma_ffa: f64,
    #[serde(default)]
    pub gaussian_denominator: GaussianDenominator,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            sigma_fla: 0.18,
            sigma_ffa: 0.68,
            gaussian_denominator: GaussianDenominator::SigmaSq,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        check_sigma(self.sigma_fla)?;
        check_sigma(self.sigma_ffa)
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "temperature must be positive, got {sigma}"
        )))
    }
}

fn gaussian(s: f64, centre: f64, sigma: f64, denom: GaussianDenominator) -> Result<f64> {
    check_sigma(sigma)?;
    if !s.is_finite() {
        return Err(Error::Domain(format!("confidence {s}")));
    }
    let d = s - centre;
    Ok((-(d * d) / (denom.factor() * sigma * sigma)).exp())
}

/// Softmax confidence of `logits` for label `label`.
pub fn id_quality(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Domain("non-finite logit".into()));
    }
    Ok(softmax(logits)[label])
}

pub fn fla_score(s: f64, sigma_fla: f64) -> Result<f64> {
    fla_score_with(s, sigma_fla, GaussianDenominator::SigmaSq)
}

pub fn fla_score_with(s: f64, sigma_fla: f64, denom: GaussianDenominator) -> Result<f64> {
    gaussian(s, 0.5, sigma_fla, denom)
}

pub fn ffa_score(s: f64, sigma_ffa: f64) -> Result<f64> {
    ffa_score_with(s, sigma_ffa, GaussianDenominator::SigmaSq)
}

pub fn ffa_score_with(s: f64, sigma_ffa: f64, denom: GaussianDenominator) -> Result<f64> {
    gaussian(s, 1.0, sigma_ffa, denom)
}

pub fn ffa_mh_score(s: f64, sigma_ffa: f64) -> Result<f64> {
    ffa_mh_score_with(s, sigma_ffa, GaussianDenominator::SigmaSq)
}

pub fn ffa_mh_score_with(s: f64, sigma_ffa: f64, denom: GaussianDenominator) -> Result<f64> {
    gaussian(s, 0.5, sigma_ffa, denom)
}

/// Per-item confidence and both attention weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QualityRecord {
    pub s: Vec<f64>,
    pub fla: Vec<f64>,
    pub ffa: Vec<f64>,
}

impl QualityRecord {
    pub fn compute(confidences: &[f64], config: &AttentionConfig) -> Result<Self> {
        let fla = confidences
            .iter()
            .map(|&s| fla_score_with(s, config.sigma_fla, config.gaussian_denominator))
            .collect::<Result<_>>()?;
        let ffa = confidences
            .iter()
            .map(|&s| ffa_score_with(s, config.sigma_ffa, config.gaussian_denominator))
            .collect::<Result<_>>()?;
        Ok(Self {
            s: confidences.to_vec(),
            fla,
            ffa,
        })
    }
}

/// What fusion does when every weight is (nearly) zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DegenerateWeights {
    #[default]
    Error,
    FallbackToMean,
}

/// Result of a weighted fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct Fused<T> {
    pub value: T,
    /// The weights were degenerate and the plain mean was used.
    pub fell_back: bool,
}

fn check_weights(n: usize, weights: &[f64], guard: DegenerateWeights) -> Result<bool> {
    if n == 0 {
        return Err(Error::Degenerate("cannot fuse an empty set".into()));
    }
    if weights.len() != n {
        return Err(Error::dim(
            "fuse_set",
            format!("{n} embeddings, {} weights", weights.len()),
        ));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Domain(
            "fusion weights must be finite and non-negative".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if total < FUSION_EPSILON {
        return match guard {
            DegenerateWeights::Error => {
                Err(Error::Degenerate(format!("fusion weights sum to {total}")))
            }
            DegenerateWeights::FallbackToMean => Ok(true),
        };
    }
    Ok(false)
}

/// `sum(w_i z_i) / sum(w_i)` over plain vectors.
pub fn fuse_set(
    embeddings: &[Vec<f64>],
    weights: &[f64],
    guard: DegenerateWeights,
) -> Result<Fused<Vec<f64>>> {
    let fell_back = check_weights(embeddings.len(), weights, guard)?;
    let dim = embeddings[0].len();
    if embeddings.iter().any(|z| z.len() != dim) {
        return Err(Error::dim("fuse_set", "embeddings differ in length"));
    }
    let uniform;
    let weights = if fell_back {
        uniform = vec![1.0; embeddings.len()];
        &uniform
    } else {
        weights
    };
    let total: f64 = weights.iter().sum();
    let mut acc = vec![0.0; dim];
    for (z, &w) in embeddings.iter().zip(weights) {
        for (a, v) in acc.iter_mut().zip(z) {
            *a += w * v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= total);
    Ok(Fused {
        value: acc,
        fell_back,
    })
}

/// Graph version of [`fuse_set`]; the weights enter as constants.
pub fn fuse_set_graph(
    g: &mut Graph,
    embeddings: &[Var],
    weights: &[f64],
    guard: DegenerateWeights,
) -> Result<Fused<Var>> {
    let fell_back = check_weights(embeddings.len(), weights, guard)?;
    let value = if fell_back {
        g.weighted_mean(embeddings, &vec![1.0; embeddings.len()])?
    } else {
        g.weighted_mean(embeddings, weights)?
    };
    Ok(Fused { value, fell_back })
}
