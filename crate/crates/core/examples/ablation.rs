//! Trains every cell of the default ablation grid over several seeds and
//! prints seed-mean CMC-1 and mAP per cell.
//!
//! ```text
//! cargo run --release --example ablation -- [num_seeds] [iterations] [outlier_rate]
//! ```

use std::time::Instant;

use ide::config::ExperimentConfig;
use ide::experiment::{run_ablation, Cell};

fn main() -> ide::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let num_seeds: u64 = args.first().map_or(5, |s| s.parse().expect("num_seeds"));
    let mut config = ExperimentConfig::default();
    if let Some(it) = args.get(1) {
        config.train.iterations = it.parse().expect("iterations");
    }
    if let Some(rho) = args.get(2) {
        config.benchmark = config
            .benchmark
            .with_outlier_rate(rho.parse().expect("outlier_rate"));
    }
    config.eval.num_seeds = num_seeds;
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());

    let start = Instant::now();
    let table = run_ablation(&config, &Cell::DEFAULT_GRID, &config.seeds(), jobs)?;
    println!(
        "{:<12} {:>16} {:>16} {:>16}",
        "cell", "cmc1", "map", "cross cmc1"
    );
    for cell in Cell::DEFAULT_GRID {
        let s = table.summary(cell);
        println!(
            "{:<12} {:>7.4} ± {:<6.4} {:>7.4} ± {:<6.4} {:>7.4} ± {:<6.4}",
            cell.name(),
            s.cmc1_mean,
            s.cmc1_std,
            s.map_mean,
            s.map_std,
            s.cross_cmc1_mean,
            s.cross_cmc1_std
        );
    }
    println!("{} runs in {:.1?}", table.rows.len(), start.elapsed());
    Ok(())
}
