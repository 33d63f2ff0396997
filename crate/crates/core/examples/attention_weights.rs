//! Prints the feature-learning and feature-fusion attention curves, then the
//! weights the training step assigns to the items of one mini-batch.

use ide::config::ExperimentConfig;
use ide::data::build_benchmark;
use ide::quality::{ffa_mh_score, ffa_score, fla_score, AttentionConfig};
use ide::train::{batch_at, forward};

fn main() -> ide::Result<()> {
    let att = AttentionConfig::default();
    println!("{:>5} {:>8} {:>8} {:>8}", "s", "fla", "ffa", "ffa_mh");
    for i in 0..=10 {
        let s = i as f64 / 10.0;
        println!(
            "{s:>5.1} {:>8.4} {:>8.4} {:>8.4}",
            fla_score(s, att.sigma_fla)?,
            ffa_score(s, att.sigma_ffa)?,
            ffa_mh_score(s, att.sigma_ffa)?
        );
    }

    let config = ExperimentConfig::default();
    let bench = build_benchmark(&config.benchmark, 0)?;
    let (model, params, _) = ide::experiment::train_on(&config, &bench)?;
    let train = config.train_config();
    let batch = batch_at(&bench.train.training_view(), &train, 10_000)?;
    let fwd = forward(&model, &params, &batch, &train, None)?;
    let fla_total: f64 = fwd.weights.ce.iter().sum();

    let n = batch.sets[0].items.len();
    for (j, set) in batch.sets.iter().enumerate().take(2) {
        println!("\nset {j} (identity {})", set.label);
        println!("{:>4} {:>8} {:>10} {:>8}", "item", "s", "fla share", "ffa");
        for i in 0..n {
            let k = j * n + i;
            println!(
                "{i:>4} {:>8.4} {:>10.4} {:>8.4}",
                fwd.quality.s[k],
                fwd.weights.ce[k] / fla_total,
                fwd.weights.fusion[j][i]
            );
        }
    }
    Ok(())
}
