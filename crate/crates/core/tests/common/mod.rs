//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use ide::autodiff::ParamStore;
use ide::data::{BatchSet, MiniBatch};
use ide::model::{EmbedderConfig, Model};
use ide::rng;
use rand::Rng;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences of `f` at every entry of every parameter.
pub fn numeric_gradients(
    params: &ParamStore,
    h: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let len = params.get(&name).unwrap().len();
        let mut grads = Vec::with_capacity(len);
        for i in 0..len {
            let mut plus = params.clone();
            plus.get_mut(&name).unwrap().data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(&name).unwrap().data_mut()[i] -= h;
            grads.push((f(&plus) - f(&minus)) / (2.0 * h));
        }
        out.push((name, grads));
    }
    out
}

/// The micro problem: 2 persons x 2 sets (m = 4), n = 3 items, C = 3
/// identities, d = 4, input_dim = 6.
pub fn micro_problem(seed: u64) -> (Model, ParamStore, MiniBatch) {
    let model = Model::new(EmbedderConfig {
        input_dim: 6,
        hidden_dims: vec![8],
        embed_dim: 4,
        num_identities: 3,
    })
    .unwrap();
    let params = model.init_params(seed).unwrap();
    let mut rng = rng::stream(seed, "micro", 0);
    let labels = [0usize, 0, 2, 2];
    let sets = labels
        .iter()
        .map(|&label| BatchSet {
            items: (0..3)
                .map(|_| (0..6).map(|_| rng.random_range(-1.5..1.5)).collect())
                .collect(),
            label,
        })
        .collect();
    let batch = MiniBatch {
        sets,
        persons: 2,
        sets_per_person: 2,
    };
    (model, params, batch)
}

/// Cosine distance written out directly.
pub fn brute_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    (1.0 - dot / (na.sqrt() * nb.sqrt())).clamp(0.0, 2.0)
}

/// CMC and mAP by counting, without sorting: the rank of gallery entry `g`
/// is the number of entries strictly closer, plus equally close entries
/// with a smaller index.
pub fn brute_metrics(
    queries: &[(Vec<f64>, usize)],
    gallery: &[(Vec<f64>, usize)],
) -> (Vec<f64>, f64) {
    let mut first_ranks = Vec::new();
    let mut ap_sum = 0.0;
    for (q, ql) in queries {
        let d: Vec<f64> = gallery.iter().map(|(g, _)| brute_cosine(q, g)).collect();
        let rank = |g: usize| {
            (0..gallery.len())
                .filter(|&o| d[o] < d[g] || (d[o] == d[g] && o < g))
                .count()
        };
        let correct: Vec<usize> = (0..gallery.len())
            .filter(|&g| gallery[g].1 == *ql)
            .collect();
        let ranks: Vec<usize> = correct.iter().map(|&g| rank(g)).collect();
        first_ranks.push(*ranks.iter().min().unwrap());
        let mut ap = 0.0;
        for &r in &ranks {
            let hits = ranks.iter().filter(|&&o| o <= r).count();
            ap += hits as f64 / (r + 1) as f64;
        }
        ap_sum += ap / ranks.len() as f64;
    }
    let cmc = (0..gallery.len())
        .map(|k| first_ranks.iter().filter(|&&r| r <= k).count() as f64 / queries.len() as f64)
        .collect();
    (cmc, ap_sum / queries.len() as f64)
}

pub type Labelled = Vec<(Vec<f64>, usize)>;

/// A random retrieval instance with every query identity in the gallery.
/// Embeddings are drawn from a few discrete levels so exact ties occur.
pub fn random_instance(seed: u64) -> (Labelled, Labelled) {
    let mut rng = rng::stream(seed, "metric-instance", 0);
    let dim = rng.random_range(2..6);
    let ids = rng.random_range(2..12);
    let nq = rng.random_range(1..=50);
    let ng = rng.random_range(ids..=200);
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim)
                .map(|_| rng.random_range(-2i32..=2) as f64)
                .collect();
            if v.iter().any(|x| *x != 0.0) {
                return v;
            }
        }
    };
    let mut gallery: Vec<(Vec<f64>, usize)> = (0..ng).map(|i| (draw(&mut rng), i % ids)).collect();
    for i in (1..gallery.len()).rev() {
        let j = rng.random_range(0..=i);
        gallery.swap(i, j);
    }
    let queries = (0..nq)
        .map(|_| (draw(&mut rng), rng.random_range(0..ids)))
        .collect();
    (queries, gallery)
}
