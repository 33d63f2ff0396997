//! Command-line front end: benchmark generation, training, evaluation,
//! ablation grids and temperature sweeps.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing or unreadable
//! input, 4 numeric failure, 1 anything else.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use ide::checkpoint;
use ide::config::ExperimentConfig;
use ide::data::{self, Benchmark};
use ide::eval::{evaluate_split, EvalReport};
use ide::experiment::{self, Cell, SweepAxis};
use ide::model::Model;
use ide::rng;
use ide::train;
use ide::Error;

#[derive(Parser)]
#[command(name = "ide", version, about = "ID-aware set embedding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic benchmark directory.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train on a benchmark and write a checkpoint and loss log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        benchmark: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides `train.iterations`.
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Evaluate a checkpoint on a benchmark split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `test` or `cross`.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the ablation grid over the configured seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated cells; defaults to the standard five.
        #[arg(long, value_delimiter = ',')]
        cells: Option<Vec<String>>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Sweep one attention temperature over the configured seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `fla` or `ffa`.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; defaults to the axis' standard grid.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::MissingInput(_) | Error::Format { .. } => 3,
        Error::NumericFailure { .. } => 4,
        _ => 1,
    }
}

fn load_config(common: &Common) -> ide::Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn out_dir(common: &Common, config: &ExperimentConfig) -> ide::Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .unwrap_or_else(|| config.output.dir.clone());
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Appends a timestamped line to `run.log`; the only output that varies
/// between identical invocations.
fn log_run(dir: &Path, command: &str, config: &ExperimentConfig) -> ide::Result<()> {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("run.log"))?;
    writeln!(
        f,
        "{secs} {command} seed={} fingerprint={}",
        config.seed,
        config.fingerprint()
    )?;
    Ok(())
}

fn write_report(dir: &Path, report: &EvalReport) -> ide::Result<()> {
    fs::write(
        dir.join("eval_report.json"),
        serde_json::to_string_pretty(report)? + "\n",
    )?;
    let mut cmc = String::from("rank,value,fingerprint\n");
    for (r, v) in report.cmc.iter().enumerate() {
        cmc.push_str(&format!("{},{v},{}\n", r + 1, report.config_fingerprint));
    }
    fs::write(dir.join("cmc.csv"), cmc)?;
    Ok(())
}

fn generate(common: &Common) -> ide::Result<()> {
    let config = load_config(common)?;
    let dir = out_dir(common, &config)?;
    let bench = data::build_benchmark(&config.benchmark, config.seed)?;
    let manifest = data::write_benchmark(&bench, &dir, &config.fingerprint())?;
    log_run(&dir, "generate", &config)?;
    log::info!(
        "wrote {} splits to {}",
        manifest.splits.len(),
        dir.display()
    );
    Ok(())
}

fn load_benchmark(dir: &Path) -> ide::Result<Benchmark> {
    if !dir.join("manifest.json").exists() {
        return Err(Error::MissingInput(dir.join("manifest.json")));
    }
    Ok(data::read_benchmark(dir, false)?.1)
}

fn train_cmd(
    common: &Common,
    benchmark: &Path,
    resume: Option<&Path>,
    iterations: Option<u64>,
) -> ide::Result<()> {
    let mut config = load_config(common)?;
    if let Some(n) = iterations {
        config.train.iterations = n;
    }
    config.validate()?;
    let bench = load_benchmark(benchmark)?;
    let dir = out_dir(common, &config)?;
    let model = Model::new(config.embedder())?;
    let (mut params, start) = match resume {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            model.check_params(&ckpt.params)?;
            (ckpt.params, ckpt.iteration)
        }
        None => (
            model.init_params(rng::derive_seed(config.seed, "model", 0))?,
            0,
        ),
    };
    let fingerprint = config.fingerprint();

    let open = |name: &str| -> std::io::Result<BufWriter<File>> {
        let path = dir.join(name);
        let appending = resume.is_some() && path.exists();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(appending)
            .truncate(!appending)
            .open(path)?;
        Ok(BufWriter::new(file))
    };
    let mut losses = open("losses.csv")?;
    if fs::metadata(dir.join("losses.csv"))?.len() == 0 {
        writeln!(losses, "iteration,wcel,cl,total,fingerprint")?;
    }
    let mut attention = if config.eval.attention_log {
        let mut w = open("attention.csv")?;
        if fs::metadata(dir.join("attention.csv"))?.len() == 0 {
            writeln!(w, "iteration,item,s,fla,ffa")?;
        }
        Some(w)
    } else {
        None
    };

    let mut io_error = None;
    let end = train::train(
        &model,
        &mut params,
        &bench.train.training_view(),
        &config.train_config(),
        start,
        |r| {
            let l = r.losses;
            let mut result = writeln!(
                losses,
                "{},{},{},{},{fingerprint}",
                r.iteration, l.wcel, l.cl, l.total
            );
            if let Some(w) = attention.as_mut() {
                for (i, ((s, fla), ffa)) in r
                    .quality
                    .s
                    .iter()
                    .zip(&r.quality.fla)
                    .zip(&r.quality.ffa)
                    .enumerate()
                {
                    result = result.and(writeln!(w, "{},{i},{s},{fla},{ffa}", r.iteration));
                }
            }
            if let Err(e) = result {
                io_error.get_or_insert(e);
            }
            if r.iteration % 100 == 0 {
                log::info!("iteration {}: total loss {:.6}", r.iteration, l.total);
            }
        },
    )?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    losses.flush()?;
    if let Some(w) = attention.as_mut() {
        w.flush()?;
    }
    checkpoint::save(&dir.join("checkpoint.bin"), &params, end)?;
    log_run(&dir, "train", &config)?;
    log::info!("trained to iteration {end}");
    Ok(())
}

fn evaluate_cmd(common: &Common, benchmark: &Path, ckpt: &Path, split: &str) -> ide::Result<()> {
    let config = load_config(common)?;
    let bench = load_benchmark(benchmark)?;
    let ckpt = checkpoint::load(ckpt)?;
    let model = Model::new(config.embedder())?;
    model.check_params(&ckpt.params)?;
    let report = match split {
        "test" => evaluate_split(&model, &ckpt.params, &bench.test)?,
        "cross" => {
            let cross = bench
                .cross
                .as_ref()
                .ok_or_else(|| Error::Config("benchmark has no cross-scene split".into()))?;
            experiment::run_cross_scene(&model, &ckpt.params, &bench, cross)?
        }
        other => return Err(Error::Config(format!("unknown split `{other}`"))),
    }
    .stamped(&config.fingerprint(), config.seed);
    let dir = out_dir(common, &config)?;
    write_report(&dir, &report)?;
    log_run(&dir, "evaluate", &config)?;
    log::info!("CMC-1 {:.4}, mAP {:.4}", report.cmc_at(1), report.map);
    Ok(())
}

fn ablate(common: &Common, cells: Option<&[String]>, jobs: usize) -> ide::Result<()> {
    let config = load_config(common)?;
    let cells: Vec<Cell> = match cells {
        Some(names) => names
            .iter()
            .map(|n| n.parse())
            .collect::<ide::Result<_>>()?,
        None => Cell::DEFAULT_GRID.to_vec(),
    };
    let table = experiment::run_ablation(&config, &cells, &config.seeds(), jobs)?;
    let dir = out_dir(common, &config)?;
    fs::write(dir.join("ablation_table.csv"), table.to_csv())?;
    log_run(&dir, "ablate", &config)?;
    for cell in cells {
        let s = table.summary(cell);
        log::info!(
            "{cell}: CMC-1 {:.4} ± {:.4}, mAP {:.4} ± {:.4}",
            s.cmc1_mean,
            s.cmc1_std,
            s.map_mean,
            s.map_std
        );
    }
    Ok(())
}

fn sweep(common: &Common, axis: &str, values: Option<&[f64]>, jobs: usize) -> ide::Result<()> {
    let config = load_config(common)?;
    let axis: SweepAxis = axis.parse()?;
    let values = values.map_or_else(|| axis.default_values(), <[f64]>::to_vec);
    let table = experiment::sigma_sweep(&config, axis, &values, &config.seeds(), jobs)?;
    let dir = out_dir(common, &config)?;
    fs::write(dir.join("sigma_sweep.csv"), table.to_csv())?;
    log_run(&dir, "sweep", &config)?;
    log::info!("seed-mean CMC-1 spread {:.4}", table.spread());
    Ok(())
}

fn run(cli: Cli) -> ide::Result<()> {
    match cli.command {
        Command::Generate { common } => generate(&common),
        Command::Train {
            common,
            benchmark,
            checkpoint,
            iterations,
        } => train_cmd(&common, &benchmark, checkpoint.as_deref(), iterations),
        Command::Evaluate {
            common,
            benchmark,
            checkpoint,
            split,
        } => evaluate_cmd(&common, &benchmark, &checkpoint, &split),
        Command::Ablate {
            common,
            cells,
            jobs,
        } => ablate(&common, cells.as_deref(), jobs),
        Command::Sweep {
            common,
            axis,
            values,
            jobs,
        } => sweep(&common, &axis, values.as_deref(), jobs),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("IDE_LOG_LEVEL", "info"))
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
