//! Generates a benchmark, writes it to disk and reads it back.

use ide::config::ExperimentConfig;
use ide::data::{build_benchmark, read_benchmark, write_benchmark};

fn main() -> ide::Result<()> {
    let config = ExperimentConfig::default();
    let bench = build_benchmark(&config.benchmark, config.seed)?;
    bench.check_disjoint()?;

    let dir = std::env::temp_dir().join(format!("ide-benchmark-{}", std::process::id()));
    let manifest = write_benchmark(&bench, &dir, &config.fingerprint())?;
    for entry in &manifest.splits {
        println!(
            "{:<6} scene {}  {:>3} identities  {:>4} sets  -> {}",
            entry.name,
            entry.scene_id,
            entry.identities.len(),
            entry.num_sets,
            entry.records
        );
    }

    let (read_manifest, restored) = read_benchmark(&dir, true)?;
    assert_eq!(read_manifest.config_fingerprint, config.fingerprint());
    assert_eq!(restored.train.sets, bench.train.sets);
    println!("round trip ok, written to {}", dir.display());
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
