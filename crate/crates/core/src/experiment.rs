//! Experiment protocols built on training and evaluation: the ablation grid
//! over loss and fusion modes, cross-scene testing, and temperature sweeps.
//!
//! Within one seed every cell sees the same benchmark, the same parameter
//! initialisation and the same mini-batch sequence, so differences between
//! cells come from the loss and fusion modes alone.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::ParamStore;
use crate::config::ExperimentConfig;
use crate::data::{build_benchmark, Benchmark, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, EvalReport};
use crate::model::Model;
use crate::quality::FusionMode;
use crate::rng;
use crate::train::{self, CeMode, LossComponents};

/// A cell of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Cell {
    pub ce_mode: CeMode,
    pub fusion_mode: FusionMode,
}

impl Cell {
    pub const BASELINE: Cell = Cell::new(CeMode::Standard, FusionMode::Average);
    pub const FLA: Cell = Cell::new(CeMode::FlaWeighted, FusionMode::Average);
    pub const FFA: Cell = Cell::new(CeMode::Standard, FusionMode::Ffa);
    pub const FFA_MH: Cell = Cell::new(CeMode::Standard, FusionMode::FfaMh);
    pub const FLA_FFA: Cell = Cell::new(CeMode::FlaWeighted, FusionMode::Ffa);
    pub const FLA_FFA_MH: Cell = Cell::new(CeMode::FlaWeighted, FusionMode::FfaMh);

    /// Baseline, FLA, FFA, FLA+FFA and FLA+FFA_MH.
    pub const DEFAULT_GRID: [Cell; 5] = [
        Cell::BASELINE,
        Cell::FLA,
        Cell::FFA,
        Cell::FLA_FFA,
        Cell::FLA_FFA_MH,
    ];

    pub const fn new(ce_mode: CeMode, fusion_mode: FusionMode) -> Self {
        Self {
            ce_mode,
            fusion_mode,
        }
    }

    /// Every combination of the given modes.
    pub fn grid(ce_modes: &[CeMode], fusion_modes: &[FusionMode]) -> Vec<Cell> {
        ce_modes
            .iter()
            .flat_map(|&c| fusion_modes.iter().map(move |&f| Cell::new(c, f)))
            .collect()
    }

    pub fn name(&self) -> String {
        match (self.ce_mode, self.fusion_mode) {
            (CeMode::Standard, FusionMode::Average) => "Baseline".into(),
            (CeMode::FlaWeighted, FusionMode::Average) => "FLA".into(),
            (CeMode::Standard, FusionMode::Ffa) => "FFA".into(),
            (CeMode::Standard, FusionMode::FfaMh) => "FFA_MH".into(),
            (CeMode::FlaWeighted, FusionMode::Ffa) => "FLA+FFA".into(),
            (CeMode::FlaWeighted, FusionMode::FfaMh) => "FLA+FFA_MH".into(),
        }
    }

    /// `config` with this cell's modes.
    pub fn apply(&self, config: &ExperimentConfig) -> ExperimentConfig {
        let mut c = config.clone();
        c.train.ce_mode = self.ce_mode;
        c.train.fusion_mode = self.fusion_mode;
        c
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Cell {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Cell::BASELINE,
            Cell::FLA,
            Cell::FFA,
            Cell::FFA_MH,
            Cell::FLA_FFA,
            Cell::FLA_FFA_MH,
        ]
        .into_iter()
        .find(|c| c.name().eq_ignore_ascii_case(s))
        .ok_or_else(|| Error::Config(format!("unknown ablation cell `{s}`")))
    }
}

/// Trains a model on `bench` with `config` (modes and seed taken from it).
pub fn train_on(
    config: &ExperimentConfig,
    bench: &Benchmark,
) -> Result<(Model, ParamStore, LossComponents)> {
    let model = Model::new(config.embedder())?;
    let mut params = model.init_params(rng::derive_seed(config.seed, "model", 0))?;
    let train_cfg = config.train_config();
    let mut last = LossComponents {
        wcel: f64::NAN,
        cl: f64::NAN,
        total: f64::NAN,
    };
    train::train(
        &model,
        &mut params,
        &bench.train.training_view(),
        &train_cfg,
        0,
        |r| {
            last = r.losses;
        },
    )?;
    Ok((model, params, last))
}

/// One trained cell at one seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutcome {
    pub cell: String,
    pub seed: u64,
    pub within: EvalReport,
    pub cross: Option<EvalReport>,
    pub final_losses: LossComponents,
}

/// Trains `cell` on `bench` and evaluates on its test and cross-scene splits.
pub fn run_cell(config: &ExperimentConfig, bench: &Benchmark, cell: Cell) -> Result<RunOutcome> {
    let cfg = cell.apply(config);
    let fingerprint = cfg.fingerprint();
    let (model, params, final_losses) = train_on(&cfg, bench)?;
    let within = evaluate_split(&model, &params, &bench.test)?.stamped(&fingerprint, cfg.seed);
    let cross = match &bench.cross {
        Some(split) => {
            Some(run_cross_scene(&model, &params, bench, split)?.stamped(&fingerprint, cfg.seed))
        }
        None => None,
    };
    Ok(RunOutcome {
        cell: cell.name(),
        seed: cfg.seed,
        within,
        cross,
        final_losses,
    })
}

/// Evaluates a trained model on a split from another scene.
pub fn run_cross_scene(
    model: &Model,
    params: &ParamStore,
    bench: &Benchmark,
    foreign: &Split,
) -> Result<EvalReport> {
    let train_ids = bench.train.identity_set();
    if let Some(shared) = foreign.identities.iter().find(|l| train_ids.contains(l)) {
        return Err(Error::Config(format!(
            "identity {shared} of `{}` was seen in training",
            foreign.name
        )));
    }
    evaluate_split(model, params, foreign)
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub fingerprint: String,
    pub rows: Vec<RunOutcome>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellSummary {
    pub cmc1_mean: f64,
    pub cmc1_std: f64,
    pub map_mean: f64,
    pub map_std: f64,
    pub cross_cmc1_mean: f64,
    pub cross_cmc1_std: f64,
    pub seeds: usize,
}

impl AblationTable {
    pub fn cell_rows<'a>(&'a self, cell: &'a str) -> impl Iterator<Item = &'a RunOutcome> + 'a {
        self.rows.iter().filter(move |r| r.cell == cell)
    }

    pub fn cmc1(&self, cell: Cell) -> Vec<f64> {
        self.cell_rows(&cell.name())
            .map(|r| r.within.cmc_at(1))
            .collect()
    }

    pub fn cross_cmc1(&self, cell: Cell) -> Vec<f64> {
        self.cell_rows(&cell.name())
            .filter_map(|r| r.cross.as_ref().map(|c| c.cmc_at(1)))
            .collect()
    }

    pub fn summary(&self, cell: Cell) -> CellSummary {
        let name = cell.name();
        let rows: Vec<&RunOutcome> = self.cell_rows(&name).collect();
        let (cmc1_mean, cmc1_std) =
            mean_std(&rows.iter().map(|r| r.within.cmc_at(1)).collect::<Vec<_>>());
        let (map_mean, map_std) = mean_std(&rows.iter().map(|r| r.within.map).collect::<Vec<_>>());
        let (cross_cmc1_mean, cross_cmc1_std) = mean_std(&self.cross_cmc1(cell));
        CellSummary {
            cmc1_mean,
            cmc1_std,
            map_mean,
            map_std,
            cross_cmc1_mean,
            cross_cmc1_std,
            seeds: rows.len(),
        }
    }

    /// `cell,seed,cmc1,map,cross_cmc1,fingerprint` per run, then one
    /// `mean` and one `std` row per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell,seed,cmc1,map,cross_cmc1,fingerprint\n");
        let fmt_opt = |r: &RunOutcome| {
            r.cross
                .as_ref()
                .map_or(String::new(), |c| c.cmc_at(1).to_string())
        };
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.cell,
                r.seed,
                r.within.cmc_at(1),
                r.within.map,
                fmt_opt(r),
                r.within.config_fingerprint
            ));
        }
        let mut cells: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !cells.contains(&r.cell.as_str()) {
                cells.push(&r.cell);
            }
        }
        for name in cells {
            let cell: Cell = name.parse().expect("rows carry valid cell names");
            let s = self.summary(cell);
            out.push_str(&format!(
                "{name},mean,{},{},{},{}\n{name},std,{},{},{},{}\n",
                s.cmc1_mean,
                s.map_mean,
                s.cross_cmc1_mean,
                self.fingerprint,
                s.cmc1_std,
                s.map_std,
                s.cross_cmc1_std,
                self.fingerprint
            ));
        }
        out
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Benchmarks for `seeds`, built from `config.benchmark`.
pub fn benchmarks_for(
    config: &ExperimentConfig,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<Benchmark>> {
    pool(jobs)?.install(|| {
        seeds
            .par_iter()
            .map(|&s| build_benchmark(&config.benchmark, s))
            .collect()
    })
}

/// Every cell at every seed; each seed gets its own benchmark and
/// initialisation, shared by all cells. Rows are ordered seed-major.
pub fn run_ablation(
    config: &ExperimentConfig,
    cells: &[Cell],
    seeds: &[u64],
    jobs: usize,
) -> Result<AblationTable> {
    let benches = benchmarks_for(config, seeds, jobs)?;
    run_ablation_on(config, &benches, cells, jobs)
}

/// [`run_ablation`] on prebuilt benchmarks; the seed of each benchmark is
/// also the training seed.
pub fn run_ablation_on(
    config: &ExperimentConfig,
    benches: &[Benchmark],
    cells: &[Cell],
    jobs: usize,
) -> Result<AblationTable> {
    let jobs_list: Vec<(usize, Cell)> = (0..benches.len())
        .flat_map(|b| cells.iter().map(move |&c| (b, c)))
        .collect();
    let rows = pool(jobs)?.install(|| {
        jobs_list
            .par_iter()
            .map(|&(b, cell)| {
                let bench = &benches[b];
                let mut cfg = config.clone();
                cfg.seed = bench.seed;
                cfg.benchmark = bench.config.clone();
                run_cell(&cfg, bench, cell)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(AblationTable {
        fingerprint: config.fingerprint(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Fla,
    Ffa,
}

impl SweepAxis {
    /// The temperature grid examined for each axis.
    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepAxis::Fla => vec![0.12, 0.15, 0.18, 0.21, 0.24],
            SweepAxis::Ffa => vec![0.62, 0.65, 0.68, 0.71, 0.74],
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Fla => "fla",
            SweepAxis::Ffa => "ffa",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fla" => Ok(SweepAxis::Fla),
            "ffa" => Ok(SweepAxis::Ffa),
            other => Err(Error::Config(format!("unknown sweep axis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub sigma: f64,
    pub seed: u64,
    pub cmc1: f64,
    pub map: f64,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Seed-mean CMC-1 per sigma, in sweep order.
    pub fn mean_cmc1(&self) -> Vec<(f64, f64)> {
        let mut sigmas: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !sigmas.contains(&r.sigma) {
                sigmas.push(r.sigma);
            }
        }
        sigmas
            .into_iter()
            .map(|s| {
                let v: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.sigma == s)
                    .map(|r| r.cmc1)
                    .collect();
                (s, mean_std(&v).0)
            })
            .collect()
    }

    /// Max minus min of the seed-mean CMC-1 over the sweep.
    pub fn spread(&self) -> f64 {
        let means: Vec<f64> = self.mean_cmc1().into_iter().map(|(_, m)| m).collect();
        let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
        hi - lo
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,sigma,seed,cmc1,map,fingerprint\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.axis, r.sigma, r.seed, r.cmc1, r.map, r.fingerprint
            ));
        }
        out
    }
}

/// Trains the configured cell once per `(sigma, seed)` with one temperature
/// varied and the other held at its configured value.
pub fn sigma_sweep(
    config: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
    jobs: usize,
) -> Result<SweepTable> {
    let benches = benchmarks_for(config, seeds, jobs)?;
    sigma_sweep_on(config, &benches, axis, values, jobs)
}

pub fn sigma_sweep_on(
    config: &ExperimentConfig,
    benches: &[Benchmark],
    axis: SweepAxis,
    values: &[f64],
    jobs: usize,
) -> Result<SweepTable> {
    let work: Vec<(f64, usize)> = values
        .iter()
        .flat_map(|&v| (0..benches.len()).map(move |b| (v, b)))
        .collect();
    let rows = pool(jobs)?.install(|| {
        work.par_iter()
            .map(|&(sigma, b)| {
                let bench = &benches[b];
                let mut cfg = config.clone();
                cfg.seed = bench.seed;
                cfg.benchmark = bench.config.clone();
                match axis {
                    SweepAxis::Fla => cfg.attention.sigma_fla = sigma,
                    SweepAxis::Ffa => cfg.attention.sigma_ffa = sigma,
                }
                cfg.validate()?;
                let (model, params, _) = train_on(&cfg, bench)?;
                let report = evaluate_split(&model, &params, &bench.test)?;
                Ok(SweepRow {
                    axis,
                    sigma,
                    seed: bench.seed,
                    cmc1: report.cmc_at(1),
                    map: report.map,
                    fingerprint: cfg.fingerprint(),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(SweepTable { rows })
}
