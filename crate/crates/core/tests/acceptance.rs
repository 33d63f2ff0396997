//! Acceptance criteria, one line each. Run with
//! `cargo test --release --test acceptance`.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{brute_metrics, micro_problem, numeric_gradients, random_instance, relative_error};
use ide::autodiff::{Graph, Tensor, Var};
use ide::config::ExperimentConfig;
use ide::data::{build_benchmark, Benchmark};
use ide::eval::{rank_embeddings, EvalReport};
use ide::experiment::{self, mean_std, AblationTable, Cell, SweepAxis};
use ide::losses;
use ide::quality::{fla_score, fuse_set, DegenerateWeights, FusionMode};
use ide::rng;
use ide::train::{self, baseline_objective, forward, loss_and_gradients, CeMode, TrainConfig};
use rand::Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let (model, params, batch) = micro_problem(2024);
    let config = TrainConfig {
        ce_mode: CeMode::FlaWeighted,
        fusion_mode: FusionMode::Ffa,
        ..TrainConfig::default()
    };
    let (fwd, grads) = loss_and_gradients(&model, &params, &batch, &config, None).unwrap();
    let frozen = fwd.weights.clone();
    let numeric = numeric_gradients(&params, 1e-5, |p| {
        forward(&model, p, &batch, &config, Some(&frozen))
            .unwrap()
            .losses
            .total
    });
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (name, num) in numeric {
        for (a, n) in grads[&name].data().iter().zip(&num) {
            worst = worst.max(relative_error(*a, *n, 1e-6));
            count += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst < 1e-4 && elapsed < Duration::from_secs(5),
        format!("{count} parameters, max rel err {worst:.2e}, {elapsed:.2?}"),
    )
}

fn stop_gradient_semantics() -> Verdict {
    let mut rng = rng::stream(7, "acceptance-sg", 0);
    let sigma = 0.18;

    // WCEL against its closed-form derivative in the confidences.
    let s: Vec<f64> = (0..12).map(|_| rng.random_range(0.02..0.98)).collect();
    let fla: Vec<f64> = s.iter().map(|&v| fla_score(v, sigma).unwrap()).collect();
    let total: f64 = fla.iter().sum();
    let mut g = Graph::new();
    let vars: Vec<Var> = s.iter().map(|&v| g.param(Tensor::scalar(v))).collect();
    let wcel = losses::weighted_cross_entropy(&mut g, &vars, &fla).unwrap();
    g.backward(wcel).unwrap();
    let wcel_err = vars
        .iter()
        .zip(&s)
        .zip(&fla)
        .map(|((v, si), wi)| (g.grad(*v).item() - (wi / total) * (-1.0 / si)).abs())
        .fold(0.0, f64::max);

    // Through the whole pipeline, the confidences only receive the WCEL
    // term even though the fusion weights are computed from them.
    let (model, params, batch) = micro_problem(99);
    let config = TrainConfig {
        ce_mode: CeMode::FlaWeighted,
        fusion_mode: FusionMode::Ffa,
        ..TrainConfig::default()
    };
    let mut fwd = forward(&model, &params, &batch, &config, None).unwrap();
    fwd.graph.backward(fwd.total).unwrap();
    let w = &fwd.weights.ce;
    let w_total: f64 = w.iter().sum();
    let pipeline_err = fwd
        .confidences
        .iter()
        .zip(w)
        .map(|(v, wi)| {
            let si = fwd.graph.value(*v).item();
            let expected = config.loss.weights.wcel * (wi / w_total) * (-1.0 / si);
            relative_error(fwd.graph.grad(*v).item(), expected, 1e-12)
        })
        .fold(0.0, f64::max);

    // Fused embedding: d(r . Phi)/dz_i must be r * FFA_i / sum(FFA) with no
    // term from the weights' dependence on z_i.
    let mut g = Graph::new();
    let head = g.param(
        Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
    );
    let zs: Vec<Var> = (0..5)
        .map(|_| {
            g.param(Tensor::vector(
                (0..4).map(|_| rng.random_range(-2.0..2.0)).collect(),
            ))
        })
        .collect();
    let mut weights = Vec::new();
    for &z in &zs {
        let logits = g.matvec(head, z).unwrap();
        let p = g.softmax(logits).unwrap();
        let s = g.index(p, 1).unwrap();
        let s = g.stop_gradient(s);
        weights.push(ide::quality::ffa_score(g.value(s).item(), 0.68).unwrap());
    }
    let r: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let phi = g.weighted_mean(&zs, &weights).unwrap();
    let rv = g.constant(Tensor::vector(r.clone()));
    let dot = g.mul(phi, rv).unwrap();
    let loss = g.sum(dot);
    g.backward(loss).unwrap();
    let w_sum: f64 = weights.iter().sum();
    let mut ffa_err: f64 = 0.0;
    for (z, wi) in zs.iter().zip(&weights) {
        for (gz, rk) in g.grad(*z).data().iter().zip(&r) {
            ffa_err = ffa_err.max((gz - rk * wi / w_sum).abs());
        }
    }
    let head_grad = g
        .grad(head)
        .data()
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    verdict(
        wcel_err < 1e-10 && pipeline_err < 1e-10 && ffa_err < 1e-10 && head_grad == 0.0,
        format!(
            "WCEL vs closed form {wcel_err:.1e}, pipeline {pipeline_err:.1e} (rel), fusion {ffa_err:.1e}, grad into FFA path {head_grad:.1e}"
        ),
    )
}

fn reduction_identities() -> Verdict {
    let mut rng = rng::stream(3, "acceptance-reduce", 0);
    let s: Vec<f64> = (0..20).map(|_| rng.random_range(0.01..0.99)).collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = s.iter().map(|&v| g.param(Tensor::scalar(v))).collect();
    let weighted = losses::weighted_cross_entropy(&mut g, &vars, &[0.37; 20]).unwrap();
    let plain = losses::cross_entropy(&mut g, &vars).unwrap();
    let a = (g.value(weighted).item() - g.value(plain).item()).abs();

    let zs: Vec<Vec<f64>> = (0..9)
        .map(|_| (0..16).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    let conf: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..1.0)).collect();
    let cfg = ide::quality::AttentionConfig {
        sigma_ffa: 1e6,
        ..Default::default()
    };
    let w = FusionMode::Ffa.weights(&conf, &cfg).unwrap();
    let ffa = fuse_set(&zs, &w, DegenerateWeights::Error).unwrap().value;
    let avg = fuse_set(&zs, &[1.0; 9], DegenerateWeights::Error)
        .unwrap()
        .value;
    let b = ffa
        .iter()
        .zip(&avg)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);

    let exp = ExperimentConfig::default();
    let bench = build_benchmark(&exp.benchmark, 0).unwrap();
    let model = ide::model::Model::new(exp.embedder()).unwrap();
    let params = model.init_params(1).unwrap();
    let cfg = TrainConfig {
        ce_mode: CeMode::Standard,
        fusion_mode: FusionMode::Average,
        ..exp.train_config()
    };
    let mut c = true;
    for it in 0..5 {
        let batch = train::batch_at(&bench.train.training_view(), &cfg, it).unwrap();
        let (fwd, grads) = loss_and_gradients(&model, &params, &batch, &cfg, None).unwrap();
        let (l, reference) = baseline_objective(&model, &params, &batch, &cfg.loss).unwrap();
        c &= fwd.losses.total.to_bits() == l.total.to_bits() && grads == reference;
    }
    verdict(
        a < 1e-12 && b < 1e-9 && c,
        format!("(a) {a:.1e}  (b) {b:.1e}  (c) bit-identical: {c}"),
    )
}

fn metric_oracles() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut monotone = true;
    for seed in 0..30 {
        let (q, g) = random_instance(5000 + seed);
        let report = EvalReport::from_outcomes(&rank_embeddings(&q, &g).unwrap(), g.len());
        let (cmc, map) = brute_metrics(&q, &g);
        for (x, y) in report.cmc.iter().zip(&cmc) {
            worst = worst.max((x - y).abs());
        }
        worst = worst.max((report.map - map).abs());
        monotone &= report.cmc.windows(2).all(|w| w[0] <= w[1]);
    }
    verdict(
        worst < 1e-12 && monotone,
        format!("30 instances, max deviation {worst:.1e}, monotone: {monotone}"),
    )
}

/// `a` beats `b` on the seed mean by more than the larger seed std.
fn beats(a: &[f64], b: &[f64]) -> (bool, String) {
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    let margin = sa.max(sb);
    (
        ma - mb > margin,
        format!(
            "{ma:.3} vs {mb:.3} (diff {:+.3}, need > {margin:.3})",
            ma - mb
        ),
    )
}

fn at_least(a: &[f64], b: &[f64]) -> (bool, String) {
    let (ma, mb) = (mean_std(a).0, mean_std(b).0);
    (ma >= mb, format!("{ma:.3} vs {mb:.3}"))
}

struct Shared {
    config: ExperimentConfig,
    table: AblationTable,
    elapsed: Duration,
}

fn benches(config: &ExperimentConfig, rho: f64) -> Vec<Benchmark> {
    let mut c = config.clone();
    c.benchmark = c.benchmark.with_outlier_rate(rho);
    experiment::benchmarks_for(&c, &c.seeds(), jobs()).unwrap()
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn ablation() -> Shared {
    let config = ExperimentConfig::default();
    let start = Instant::now();
    let grid = [
        Cell::BASELINE,
        Cell::FLA,
        Cell::FFA,
        Cell::FLA_FFA,
        Cell::FLA_FFA_MH,
    ];
    let table =
        experiment::run_ablation_on(&config, &benches(&config, 0.2), &grid, jobs()).unwrap();
    Shared {
        config,
        table,
        elapsed: start.elapsed(),
    }
}

fn ablation_ordering(s: &Shared) -> Verdict {
    let t = &s.table;
    let (full, fla, ffa, base) = (
        t.cmc1(Cell::FLA_FFA),
        t.cmc1(Cell::FLA),
        t.cmc1(Cell::FFA),
        t.cmc1(Cell::BASELINE),
    );
    let checks = [
        ("FLA+FFA > FLA", beats(&full, &fla)),
        ("FLA >= Baseline", at_least(&fla, &base)),
        ("FLA+FFA > FFA", beats(&full, &ffa)),
        ("FFA >= Baseline", at_least(&ffa, &base)),
    ];
    let fast = s.elapsed < Duration::from_secs(600);
    let pass = fast && checks.iter().all(|(_, (ok, _))| *ok);
    let detail = checks
        .iter()
        .map(|(name, (ok, d))| format!("{name}: {d} {}", if *ok { "ok" } else { "NO" }))
        .collect::<Vec<_>>()
        .join("; ");
    verdict(
        pass,
        format!(
            "{} seeds, {:.0?}; {detail}",
            s.config.eval.num_seeds, s.elapsed
        ),
    )
}

fn fusion_centre(s: &Shared) -> Verdict {
    let (ma, mb) = (
        mean_std(&s.table.cmc1(Cell::FLA_FFA)).0,
        mean_std(&s.table.cmc1(Cell::FLA_FFA_MH)).0,
    );
    verdict(ma > mb, format!("FLA+FFA {ma:.3} vs FLA+FFA_MH {mb:.3}"))
}

fn noise_trend(s: &Shared) -> Verdict {
    let cells = [Cell::BASELINE, Cell::FLA_FFA];
    let gap = |rho: f64| -> (f64, f64, f64) {
        let t = experiment::run_ablation_on(&s.config, &benches(&s.config, rho), &cells, jobs())
            .unwrap();
        let b = mean_std(&t.cmc1(Cell::BASELINE)).0;
        let f = mean_std(&t.cmc1(Cell::FLA_FFA)).0;
        (b, f, f - b)
    };
    let (b0, f0, g0) = gap(0.0);
    let (b3, f3, g3) = gap(0.3);
    verdict(
        g3 > g0,
        format!(
            "rho=0: Baseline {b0:.3}, FLA+FFA {f0:.3} (gap {g0:+.3}); rho=0.3: Baseline {b3:.3}, FLA+FFA {f3:.3} (gap {g3:+.3})"
        ),
    )
}

fn cross_scene(s: &Shared) -> Verdict {
    let t = &s.table;
    let mut lower = true;
    let mut parts = Vec::new();
    for cell in [
        Cell::BASELINE,
        Cell::FLA,
        Cell::FFA,
        Cell::FLA_FFA,
        Cell::FLA_FFA_MH,
    ] {
        let sum = t.summary(cell);
        lower &= sum.cross_cmc1_mean <= sum.cmc1_mean;
        parts.push(format!(
            "{cell} {:.3}/{:.3}",
            sum.cross_cmc1_mean, sum.cmc1_mean
        ));
    }
    let full = mean_std(&t.cross_cmc1(Cell::FLA_FFA)).0;
    let base = mean_std(&t.cross_cmc1(Cell::BASELINE)).0;
    verdict(
        lower && full > base,
        format!(
            "cross/within: {}; cross <= within: {lower}; FLA+FFA cross {full:.3} vs Baseline {base:.3}",
            parts.join(", ")
        ),
    )
}

fn sigma_insensitivity(s: &Shared) -> Verdict {
    let bench = benches(&s.config, 0.2);
    let mut spreads = Vec::new();
    for axis in [SweepAxis::Fla, SweepAxis::Ffa] {
        let t = experiment::sigma_sweep_on(&s.config, &bench, axis, &axis.default_values(), jobs())
            .unwrap();
        spreads.push((axis, t.spread(), t.mean_cmc1()));
    }
    let pass = spreads.iter().all(|(_, spread, _)| *spread < 0.05);
    let detail = spreads
        .iter()
        .map(|(axis, spread, means)| {
            let m = means
                .iter()
                .map(|(sg, v)| format!("{sg}:{v:.3}"))
                .collect::<Vec<_>>()
                .join(" ");
            format!("{axis} spread {spread:.3} [{m}]")
        })
        .collect::<Vec<_>>()
        .join("; ");
    verdict(pass, detail)
}

fn determinism() -> Verdict {
    let config = ExperimentConfig::default();
    let run = || -> Vec<u8> {
        let bench = build_benchmark(&config.benchmark, config.seed).unwrap();
        let out = experiment::run_cell(&config, &bench, Cell::FLA_FFA).unwrap();
        serde_json::to_vec_pretty(&out.within).unwrap()
    };
    let (a, b) = (run(), run());
    verdict(a == b, format!("{} bytes, identical: {}", a.len(), a == b))
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    /// Checks the implementation; a failure fails the binary.
    Correctness,
    /// Checks an empirical ordering on the synthetic benchmark; fails the
    /// binary only when `IDE_ACCEPTANCE_STRICT=1`.
    Empirical,
    Soft,
}

#[derive(Default)]
struct Tally {
    passed: usize,
    failed: usize,
    warned: usize,
    fatal: bool,
}

impl Tally {
    fn report(&mut self, id: &str, name: &str, kind: Kind, v: Verdict) {
        let status = match (v.pass, kind) {
            (true, _) => "PASS",
            (false, Kind::Soft) => "WARN",
            (false, _) => "FAIL",
        };
        println!("criterion {id:>2} {status} {name}: {}", v.detail);
        match status {
            "PASS" => self.passed += 1,
            "WARN" => self.warned += 1,
            _ => {
                self.failed += 1;
                self.fatal |= kind == Kind::Correctness || strict();
            }
        }
    }
}

fn strict() -> bool {
    std::env::var("IDE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1")
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    use Kind::*;
    let mut t = Tally::default();
    t.report(
        "1",
        "gradient correctness",
        Correctness,
        gradient_correctness(),
    );
    t.report(
        "2",
        "stop-gradient semantics",
        Correctness,
        stop_gradient_semantics(),
    );
    t.report(
        "3",
        "reduction identities",
        Correctness,
        reduction_identities(),
    );
    t.report("4", "metric oracles", Correctness, metric_oracles());
    let shared = ablation();
    t.report(
        "5",
        "ablation ordering",
        Empirical,
        ablation_ordering(&shared),
    );
    t.report(
        "6",
        "FFA centre vs medium-hard centre",
        Empirical,
        fusion_centre(&shared),
    );
    t.report(
        "7",
        "noise-robustness trend",
        Empirical,
        noise_trend(&shared),
    );
    t.report(
        "8",
        "cross-scene direction",
        Empirical,
        cross_scene(&shared),
    );
    t.report(
        "9",
        "temperature insensitivity",
        Soft,
        sigma_insensitivity(&shared),
    );
    t.report("10", "determinism", Correctness, determinism());
    println!(
        "acceptance: {} passed, {} failed, {} warned{}",
        t.passed,
        t.failed,
        t.warned,
        if strict() { " (strict)" } else { "" }
    );
    if t.fatal {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
