mod common;

use common::{brute_metrics, random_instance};
use ide::eval::{rank_embeddings, EvalReport};

#[test]
fn cmc_and_map_match_counting_oracle() {
    for seed in 0..30 {
        let (queries, gallery) = random_instance(seed);
        let outcomes = rank_embeddings(&queries, &gallery).unwrap();
        let report = EvalReport::from_outcomes(&outcomes, gallery.len());
        let (cmc, map) = brute_metrics(&queries, &gallery);
        assert_eq!(report.cmc.len(), cmc.len());
        for (r, (a, b)) in report.cmc.iter().zip(&cmc).enumerate() {
            assert!((a - b).abs() < 1e-12, "seed {seed} rank {r}: {a} vs {b}");
        }
        assert!(
            (report.map - map).abs() < 1e-12,
            "seed {seed}: {} vs {map}",
            report.map
        );
        assert!(report.cmc.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*report.cmc.last().unwrap(), 1.0);
    }
}

#[test]
fn positive_rescaling_leaves_metrics_unchanged() {
    for seed in 0..10 {
        let (queries, gallery) = random_instance(100 + seed);
        let scale = |v: &[(Vec<f64>, usize)], c: f64| -> Vec<(Vec<f64>, usize)> {
            v.iter()
                .map(|(e, l)| (e.iter().map(|x| x * c).collect(), *l))
                .collect()
        };
        let base =
            EvalReport::from_outcomes(&rank_embeddings(&queries, &gallery).unwrap(), gallery.len());
        let scaled = EvalReport::from_outcomes(
            &rank_embeddings(&scale(&queries, 4.0), &scale(&gallery, 4.0)).unwrap(),
            gallery.len(),
        );
        assert_eq!(base.cmc, scaled.cmc);
        assert!((base.map - scaled.map).abs() < 1e-12);
    }
}

#[test]
fn evaluation_is_deterministic() {
    let (queries, gallery) = random_instance(7);
    let a = rank_embeddings(&queries, &gallery).unwrap();
    let b = rank_embeddings(&queries, &gallery).unwrap();
    assert_eq!(a, b);
}
