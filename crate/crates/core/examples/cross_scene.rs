//! Trains the baseline and the full model in one scene and evaluates both on
//! identities recorded in a different scene.

use ide::config::ExperimentConfig;
use ide::data::build_benchmark;
use ide::experiment::{run_cell, Cell};

fn main() -> ide::Result<()> {
    let config = ExperimentConfig::default();
    let bench = build_benchmark(&config.benchmark, config.seed)?;
    let cross = bench
        .cross
        .as_ref()
        .expect("default benchmark has a cross-scene split");
    println!(
        "home scene {}: {} test identities; other scene {}: {} identities",
        bench.test.scene_id,
        bench.test.identities.len(),
        cross.scene_id,
        cross.identities.len()
    );
    println!("{:<10} {:>12} {:>12}", "cell", "within cmc1", "cross cmc1");
    for cell in [Cell::BASELINE, Cell::FLA_FFA] {
        let out = run_cell(&config, &bench, cell)?;
        let cross = out.cross.expect("cross report");
        println!(
            "{:<10} {:>12.4} {:>12.4}",
            cell.name(),
            out.within.cmc[0],
            cross.cmc[0]
        );
    }
    Ok(())
}
