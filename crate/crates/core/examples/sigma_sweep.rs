//! Sweeps one attention temperature with everything else fixed.
//!
//! ```text
//! cargo run --release --example sigma_sweep -- [fla|ffa] [num_seeds]
//! ```

use ide::config::ExperimentConfig;
use ide::experiment::{sigma_sweep, SweepAxis};

fn main() -> ide::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let axis: SweepAxis = args.first().map_or("fla", String::as_str).parse()?;
    let mut config = ExperimentConfig::default();
    config.eval.num_seeds = args.get(1).map_or(2, |s| s.parse().expect("num_seeds"));
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let table = sigma_sweep(&config, axis, &axis.default_values(), &config.seeds(), jobs)?;
    for (sigma, cmc1) in table.mean_cmc1() {
        println!("{axis} sigma {sigma:.2}  cmc1 {cmc1:.4}");
    }
    println!("spread {:.4}", table.spread());
    Ok(())
}
