//! One SGD step assembles the whole objective:
//!
//! 1. embed every item and classify it against the training identities;
//! 2. read each item's confidence for its set label;
//! 3. turn the (gradient-stopped) confidences into item weights for the
//!    cross-entropy and for set fusion;
//! 4. weighted cross-entropy over items, contrastive loss over fused sets;
//! 5. backward through the joint loss and update `p <- p - lr * grad`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, ParamStore, Tensor, Var};
use crate::data::{sample_minibatch, BatchShape, MiniBatch, TrainingView};
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig};
use crate::model::Model;
use crate::quality::{
    fuse_set_graph, AttentionConfig, DegenerateWeights, FusionMode, QualityRecord,
};
use crate::rng;

/// Image-level classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeMode {
    #[default]
    Standard,
    FlaWeighted,
}

impl fmt::Display for CeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CeMode::Standard => "standard",
            CeMode::FlaWeighted => "fla_weighted",
        })
    }
}

impl FromStr for CeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(CeMode::Standard),
            "fla_weighted" => Ok(CeMode::FlaWeighted),
            other => Err(Error::Config(format!("unknown ce mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// `lr_t = learning_rate / (1 + lr_decay * t)`; zero keeps it constant.
    #[serde(default)]
    pub lr_decay: f64,
    pub iterations: u64,
    pub ce_mode: CeMode,
    pub fusion_mode: FusionMode,
    pub attention: AttentionConfig,
    pub loss: LossConfig,
    pub batch: BatchShape,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            lr_decay: 0.0,
            iterations: 2000,
            ce_mode: CeMode::Standard,
            fusion_mode: FusionMode::Average,
            attention: AttentionConfig::default(),
            loss: LossConfig::default(),
            batch: BatchShape::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.lr_decay >= 0.0) || !self.lr_decay.is_finite() {
            return Err(Error::Config("lr_decay must be >= 0".into()));
        }
        self.attention.validate()?;
        self.loss.validate()
    }

    pub fn learning_rate_at(&self, iteration: u64) -> f64 {
        self.learning_rate / (1.0 + self.lr_decay * iteration as f64)
    }
}

/// Per-item weights that enter the graph as constants.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    /// Cross-entropy weight per item, batch order.
    pub ce: Vec<f64>,
    /// Fusion weight per item, grouped per set.
    pub fusion: Vec<Vec<f64>>,
}

impl AttentionWeights {
    pub fn compute(
        confidences: &[f64],
        batch: &MiniBatch,
        ce_mode: CeMode,
        fusion_mode: FusionMode,
        attention: &AttentionConfig,
    ) -> Result<(Self, QualityRecord)> {
        let quality = QualityRecord::compute(confidences, attention)?;
        let ce = match ce_mode {
            CeMode::Standard => vec![1.0; confidences.len()],
            CeMode::FlaWeighted => quality.fla.clone(),
        };
        let mut fusion = Vec::with_capacity(batch.sets.len());
        let mut offset = 0;
        for set in &batch.sets {
            let n = set.items.len();
            fusion.push(fusion_mode.weights(&confidences[offset..offset + n], attention)?);
            offset += n;
        }
        Ok((Self { ce, fusion }, quality))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub wcel: f64,
    pub cl: f64,
    pub total: f64,
}

/// Everything produced by one forward pass over a batch.
pub struct Forward {
    pub graph: Graph,
    pub bindings: Bindings,
    pub total: Var,
    pub confidences: Vec<Var>,
    pub losses: LossComponents,
    pub weights: AttentionWeights,
    pub quality: QualityRecord,
    pub fusion_fallbacks: usize,
}

fn check_labels(batch: &MiniBatch, classes: usize) -> Result<()> {
    for set in &batch.sets {
        if set.label >= classes {
            return Err(Error::LabelOutOfRange {
                label: set.label,
                classes,
            });
        }
    }
    if batch.sets.iter().any(|s| s.items.is_empty()) {
        return Err(Error::Degenerate("empty set in mini-batch".into()));
    }
    Ok(())
}

/// Builds the joint loss for `batch`.
///
/// Attention weights are computed from the gradient-stopped confidences,
/// unless `frozen` supplies them (used to hold them fixed while probing the
/// loss surface).
pub fn forward(
    model: &Model,
    params: &ParamStore,
    batch: &MiniBatch,
    config: &TrainConfig,
    frozen: Option<&AttentionWeights>,
) -> Result<Forward> {
    check_labels(batch, model.config().num_identities)?;
    let mut g = Graph::new();
    let bindings = params.bind(&mut g);
    let fwd = model.embed_batch(&mut g, &bindings, &batch.sets)?;

    let mut confidences = Vec::with_capacity(fwd.logits.len());
    let mut observed = Vec::with_capacity(fwd.logits.len());
    let mut item = 0;
    for set in &batch.sets {
        for _ in 0..set.items.len() {
            let probs = g.softmax(fwd.logits[item])?;
            let s = g.index(probs, set.label)?;
            let constant = g.stop_gradient(s);
            observed.push(g.value(constant).item());
            confidences.push(s);
            item += 1;
        }
    }

    let (computed, quality) = AttentionWeights::compute(
        &observed,
        batch,
        config.ce_mode,
        config.fusion_mode,
        &config.attention,
    )?;
    let weights = frozen.cloned().unwrap_or(computed);

    let wcel = losses::weighted_cross_entropy(&mut g, &confidences, &weights.ce)?;

    let mut fused = Vec::with_capacity(batch.sets.len());
    let mut fallbacks = 0;
    let mut offset = 0;
    for (set, w) in batch.sets.iter().zip(&weights.fusion) {
        let n = set.items.len();
        let f = fuse_set_graph(
            &mut g,
            &fwd.embeddings[offset..offset + n],
            w,
            DegenerateWeights::FallbackToMean,
        )?;
        if f.fell_back {
            fallbacks += 1;
        }
        fused.push(f.value);
        offset += n;
    }
    if fallbacks > 0 {
        log::warn!("{fallbacks} set(s) had degenerate fusion weights; used the plain mean");
    }
    let cl = losses::batch_contrastive(&mut g, &fused, &batch.labels(), config.loss.margin)?;
    let total = losses::joint_loss(&mut g, wcel, cl, config.loss.weights)?;

    let losses = LossComponents {
        wcel: g.value(wcel).item(),
        cl: g.value(cl).item(),
        total: g.value(total).item(),
    };
    Ok(Forward {
        graph: g,
        bindings,
        total,
        confidences,
        losses,
        weights,
        quality,
        fusion_fallbacks: fallbacks,
    })
}

/// Joint loss and the gradient of every parameter, by name.
pub fn loss_and_gradients(
    model: &Model,
    params: &ParamStore,
    batch: &MiniBatch,
    config: &TrainConfig,
    frozen: Option<&AttentionWeights>,
) -> Result<(Forward, BTreeMap<String, Tensor>)> {
    let mut fwd = forward(model, params, batch, config, frozen)?;
    fwd.graph.backward(fwd.total)?;
    let grads = fwd
        .bindings
        .iter()
        .map(|(name, var)| (name.to_owned(), fwd.graph.grad(var)))
        .collect();
    Ok((fwd, grads))
}

/// Reference objective for the baseline cell written without any attention
/// code: mean cross-entropy and mean fusion.
pub fn baseline_objective(
    model: &Model,
    params: &ParamStore,
    batch: &MiniBatch,
    loss: &LossConfig,
) -> Result<(LossComponents, BTreeMap<String, Tensor>)> {
    check_labels(batch, model.config().num_identities)?;
    let mut g = Graph::new();
    let bindings = params.bind(&mut g);
    let fwd = model.embed_batch(&mut g, &bindings, &batch.sets)?;
    let mut confidences = Vec::new();
    let mut item = 0;
    for set in &batch.sets {
        for _ in 0..set.items.len() {
            let probs = g.softmax(fwd.logits[item])?;
            confidences.push(g.index(probs, set.label)?);
            item += 1;
        }
    }
    let ce = losses::cross_entropy(&mut g, &confidences)?;
    let mut fused = Vec::new();
    let mut offset = 0;
    for set in &batch.sets {
        let n = set.items.len();
        fused.push(g.mean_of(&fwd.embeddings[offset..offset + n])?);
        offset += n;
    }
    let cl = losses::batch_contrastive(&mut g, &fused, &batch.labels(), loss.margin)?;
    let total = losses::joint_loss(&mut g, ce, cl, loss.weights)?;
    g.backward(total)?;
    let grads = bindings
        .iter()
        .map(|(name, var)| (name.to_owned(), g.grad(var)))
        .collect();
    let components = LossComponents {
        wcel: g.value(ce).item(),
        cl: g.value(cl).item(),
        total: g.value(total).item(),
    };
    Ok((components, grads))
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub iteration: u64,
    pub losses: LossComponents,
    pub quality: QualityRecord,
    pub fusion_fallbacks: usize,
}

fn param_summary(params: &ParamStore) -> String {
    params
        .iter()
        .map(|(name, t)| {
            let norm = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            format!("{name}: norm {norm:.6e}")
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// Forward, backward and one SGD update at `iteration`.
pub fn train_step(
    model: &Model,
    params: &mut ParamStore,
    batch: &MiniBatch,
    config: &TrainConfig,
    iteration: u64,
) -> Result<StepReport> {
    let mut fwd = forward(model, params, batch, config, None).map_err(|e| match e {
        Error::Domain(detail) => Error::NumericFailure {
            iteration,
            detail: format!("{detail}; parameters: {}", param_summary(params)),
        },
        other => other,
    })?;
    let l = fwd.losses;
    if !(l.total.is_finite() && l.wcel.is_finite() && l.cl.is_finite()) {
        return Err(Error::NumericFailure {
            iteration,
            detail: format!(
                "loss wcel={} cl={} total={}; parameters: {}",
                l.wcel,
                l.cl,
                l.total,
                param_summary(params)
            ),
        });
    }
    fwd.graph.backward(fwd.total)?;
    params.sgd_step(
        &fwd.graph,
        &fwd.bindings,
        config.learning_rate_at(iteration),
    )?;
    if !params.is_finite() {
        return Err(Error::NumericFailure {
            iteration,
            detail: format!(
                "non-finite parameters after update; {}",
                param_summary(params)
            ),
        });
    }
    Ok(StepReport {
        iteration,
        losses: fwd.losses,
        quality: fwd.quality,
        fusion_fallbacks: fwd.fusion_fallbacks,
    })
}

/// The mini-batch drawn at `iteration`; a pure function of the seed and the
/// iteration, so resumed runs see the same batches as uninterrupted ones.
pub fn batch_at(
    view: &TrainingView<'_>,
    config: &TrainConfig,
    iteration: u64,
) -> Result<MiniBatch> {
    let mut rng = rng::stream(config.seed, "batch", iteration);
    sample_minibatch(view, config.batch, &mut rng)
}

/// Runs iterations `start..start + config.iterations`, calling `observe`
/// after each step.
pub fn train(
    model: &Model,
    params: &mut ParamStore,
    view: &TrainingView<'_>,
    config: &TrainConfig,
    start: u64,
    mut observe: impl FnMut(&StepReport),
) -> Result<u64> {
    config.validate()?;
    let end = start + config.iterations;
    for iteration in start..end {
        let batch = batch_at(view, config, iteration)?;
        let report = train_step(model, params, &batch, config, iteration)?;
        observe(&report);
    }
    Ok(end)
}
