//! Set retrieval evaluation.
//!
//! Test identities are never seen in training, so no confidence is available
//! at test time: a set embedding is the plain mean of its item embeddings and
//! sets are compared by cosine distance. Each query ranks the gallery by
//! ascending distance, ties broken by gallery index.
//!
//! - `cmc[r]` is the fraction of queries whose first correct match is at
//!   rank `<= r + 1`;
//! - the average precision of a query is the mean, over its correct gallery
//!   entries, of the precision at each such entry's rank;
//! - mAP is the mean AP over queries.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::data::{SetSample, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::quality::{fuse_set, DegenerateWeights};

/// `1 - a.b / (|a| |b|)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(
            "cosine_distance",
            format!("{} vs {}", a.len(), b.len()),
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::Degenerate("cosine distance of a zero vector".into()));
    }
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

/// Mean of the set's item embeddings.
pub fn embed_test_set(model: &Model, params: &ParamStore, set: &SetSample) -> Result<Vec<f64>> {
    if set.items.is_empty() {
        return Err(Error::Degenerate("cannot embed an empty set".into()));
    }
    let zs = set
        .items
        .iter()
        .map(|x| model.embed_item(params, x))
        .collect::<Result<Vec<_>>>()?;
    let dim = zs[0].len();
    let mut acc = vec![0.0; dim];
    for z in &zs {
        acc.iter_mut().zip(z).for_each(|(a, v)| *a += v);
    }
    let n = zs.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Same as [`embed_test_set`] but routed through weighted fusion with unit
/// weights.
pub fn embed_test_set_fused(
    model: &Model,
    params: &ParamStore,
    set: &SetSample,
) -> Result<Vec<f64>> {
    let zs = set
        .items
        .iter()
        .map(|x| model.embed_item(params, x))
        .collect::<Result<Vec<_>>>()?;
    Ok(fuse_set(&zs, &vec![1.0; zs.len()], DegenerateWeights::Error)?.value)
}

/// Per-query ranking outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    /// Zero-based rank of the first correct gallery entry.
    pub first_match: usize,
    pub average_precision: f64,
}

/// Gallery indices sorted by ascending distance, ties by index.
pub fn rank_gallery(distances: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| match distances[a].total_cmp(&distances[b]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}

/// Ranks one query's gallery and scores it.
pub fn score_query(
    distances: &[f64],
    query_label: usize,
    gallery_labels: &[usize],
) -> Result<QueryOutcome> {
    if distances.len() != gallery_labels.len() {
        return Err(Error::dim(
            "score_query",
            "distance and label counts differ",
        ));
    }
    let order = rank_gallery(distances);
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first = None;
    for (rank, &g) in order.iter().enumerate() {
        if gallery_labels[g] == query_label {
            hits += 1;
            precision_sum += hits as f64 / (rank + 1) as f64;
            first.get_or_insert(rank);
        }
    }
    let first_match = first.ok_or_else(|| {
        Error::Contract(format!(
            "query identity {query_label} is absent from the gallery"
        ))
    })?;
    Ok(QueryOutcome {
        first_match,
        average_precision: precision_sum / hits as f64,
    })
}

/// CMC curve over `gallery_size` ranks from per-query outcomes.
pub fn cmc_curve(outcomes: &[QueryOutcome], gallery_size: usize) -> Vec<f64> {
    let mut counts = vec![0usize; gallery_size];
    for o in outcomes {
        counts[o.first_match] += 1;
    }
    let q = outcomes.len().max(1) as f64;
    let mut acc = 0usize;
    counts
        .into_iter()
        .map(|c| {
            acc += c;
            acc as f64 / q
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub per_query_ap: Vec<f64>,
    pub num_queries: usize,
    pub num_gallery: usize,
    pub config_fingerprint: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn from_outcomes(outcomes: &[QueryOutcome], gallery_size: usize) -> Self {
        let per_query_ap: Vec<f64> = outcomes.iter().map(|o| o.average_precision).collect();
        let map = if per_query_ap.is_empty() {
            0.0
        } else {
            per_query_ap.iter().sum::<f64>() / per_query_ap.len() as f64
        };
        Self {
            cmc: cmc_curve(outcomes, gallery_size),
            map,
            per_query_ap,
            num_queries: outcomes.len(),
            num_gallery: gallery_size,
            config_fingerprint: String::new(),
            seed: 0,
        }
    }

    pub fn stamped(mut self, fingerprint: &str, seed: u64) -> Self {
        self.config_fingerprint = fingerprint.to_owned();
        self.seed = seed;
        self
    }

    /// CMC at rank `k` (one-based).
    pub fn cmc_at(&self, k: usize) -> f64 {
        self.cmc
            .get(k.saturating_sub(1))
            .or(self.cmc.last())
            .copied()
            .unwrap_or(0.0)
    }
}

/// Outcomes for precomputed query and gallery embeddings.
pub fn rank_embeddings(
    queries: &[(Vec<f64>, usize)],
    gallery: &[(Vec<f64>, usize)],
) -> Result<Vec<QueryOutcome>> {
    let gallery_labels: Vec<usize> = gallery.iter().map(|(_, l)| *l).collect();
    queries
        .iter()
        .map(|(q, label)| {
            let d = gallery
                .iter()
                .map(|(g, _)| cosine_distance(q, g))
                .collect::<Result<Vec<_>>>()?;
            score_query(&d, *label, &gallery_labels)
        })
        .collect()
}

fn embed_all(
    model: &Model,
    params: &ParamStore,
    sets: &[&SetSample],
) -> Result<Vec<(Vec<f64>, usize)>> {
    sets.iter()
        .map(|s| Ok((embed_test_set(model, params, s)?, s.set_label)))
        .collect()
}

/// Embeds both lists with average fusion and scores every query.
pub fn evaluate(
    model: &Model,
    params: &ParamStore,
    queries: &[SetSample],
    gallery: &[SetSample],
) -> Result<EvalReport> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Degenerate(
            "evaluation needs queries and a gallery".into(),
        ));
    }
    let q = embed_all(model, params, &queries.iter().collect::<Vec<_>>())?;
    let g = embed_all(model, params, &gallery.iter().collect::<Vec<_>>())?;
    let outcomes = rank_embeddings(&q, &g)?;
    Ok(EvalReport::from_outcomes(&outcomes, gallery.len()))
}

/// Cross-camera protocol on a split: each camera in turn provides the
/// queries, every set recorded by another camera forms the gallery, and the
/// per-query outcomes of all rounds are pooled into one report.
pub fn evaluate_split(model: &Model, params: &ParamStore, split: &Split) -> Result<EvalReport> {
    let embedded = embed_all(model, params, &split.sets.iter().collect::<Vec<_>>())?;
    evaluate_split_embedded(
        &embedded,
        &split.sets.iter().map(|s| s.camera_id).collect::<Vec<_>>(),
    )
}

/// [`evaluate_split`] on precomputed `(embedding, label)` pairs.
pub fn evaluate_split_embedded(
    embedded: &[(Vec<f64>, usize)],
    cameras: &[usize],
) -> Result<EvalReport> {
    let mut cams: Vec<usize> = cameras.to_vec();
    cams.sort_unstable();
    cams.dedup();
    if cams.len() < 2 {
        return Err(Error::Degenerate(
            "cross-camera evaluation needs >= 2 cameras".into(),
        ));
    }
    let mut outcomes = Vec::new();
    let mut gallery_size = None;
    for &cam in &cams {
        let (q, g): (Vec<_>, Vec<_>) = embedded.iter().zip(cameras).partition(|(_, &c)| c == cam);
        let q: Vec<(Vec<f64>, usize)> = q.into_iter().map(|(e, _)| e.clone()).collect();
        let g: Vec<(Vec<f64>, usize)> = g.into_iter().map(|(e, _)| e.clone()).collect();
        match gallery_size {
            None => gallery_size = Some(g.len()),
            Some(n) if n != g.len() => {
                return Err(Error::Contract(
                    "cameras hold unequal numbers of sets".into(),
                ))
            }
            _ => {}
        }
        outcomes.extend(rank_embeddings(&q, &g)?);
    }
    Ok(EvalReport::from_outcomes(
        &outcomes,
        gallery_size.unwrap_or(0),
    ))
}
