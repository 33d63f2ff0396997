//! Trains the full model on one benchmark, logging the losses, and reports
//! CMC and mAP on the held-out identities.
//!
//! ```text
//! cargo run --release --example train_and_evaluate -- [iterations] [seed]
//! ```

use ide::config::ExperimentConfig;
use ide::data::build_benchmark;
use ide::eval::evaluate_split;
use ide::model::Model;
use ide::rng::derive_seed;
use ide::train::train;

fn main() -> ide::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut config = ExperimentConfig::default();
    if let Some(it) = args.first() {
        config.train.iterations = it.parse().expect("iterations");
    }
    if let Some(seed) = args.get(1) {
        config.seed = seed.parse().expect("seed");
    }
    let bench = build_benchmark(&config.benchmark, config.seed)?;
    println!(
        "train: {} sets of {} identities, {:.1}% outliers",
        bench.train.sets.len(),
        bench.train.identities.len(),
        100.0 * bench.train.outlier_fraction()
    );

    let model = Model::new(config.embedder())?;
    let mut params = model.init_params(derive_seed(config.seed, "model", 0))?;
    let every = (config.train.iterations / 10).max(1);
    train(
        &model,
        &mut params,
        &bench.train.training_view(),
        &config.train_config(),
        0,
        |r| {
            if r.iteration % every == 0 {
                println!(
                    "it {:>5}  total {:.4}  wcel {:.4}  cl {:.4}",
                    r.iteration, r.losses.total, r.losses.wcel, r.losses.cl
                );
            }
        },
    )?;

    let report = evaluate_split(&model, &params, &bench.test)?;
    println!(
        "test: {} queries, {} gallery sets",
        report.num_queries, report.num_gallery
    );
    for k in [1, 5, 10] {
        println!("CMC-{k:<2} {:.4}", report.cmc_at(k));
    }
    println!("mAP    {:.4}", report.map);
    Ok(())
}
