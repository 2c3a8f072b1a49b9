//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Exact criteria (1-5, the accounting half of 9, and 10) fail the process.
//! The empirical trend criteria (6, 7, 8 and the comparison half of 9) are
//! reported without failing it.

use std::collections::BTreeMap;
use std::time::Instant;

use mcr_core::analysis::{linear_fit, spearman};
use mcr_core::experiment::{self, Experiment};
use mcr_core::sweep::{self, Manifest, SweepResult};
use mcr_core::synthdata::SyntheticSpec;
use mcr_core::game::Strategy;
use mcr_core::trainer::{Method, RunConfig};
use mcr_core::verify::{self, VerifyOptions};

const CHANCE: f64 = 0.2;

struct Outcome {
    passed: bool,
    detail: String,
}

fn line(id: usize, name: &str, o: &Outcome, seconds: f64) {
    let tag = if o.passed { "PASS" } else { "FAIL" };
    println!("criterion {id:>2} {tag} {name}: {} ({seconds:.1}s)", o.detail);
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn verify_checks(filter: &str, budget_s: Option<f64>) -> Outcome {
    let start = Instant::now();
    let results = verify::run_checks(&VerifyOptions {
        filter: Some(filter.into()),
        flip_greedy_sign: false,
    });
    let elapsed = start.elapsed().as_secs_f64();
    let all = !results.is_empty() && results.iter().all(|r| r.passed);
    let in_budget = budget_s.is_none_or(|b| elapsed < b);
    let mut detail: Vec<String> = results
        .iter()
        .map(|r| format!("[{} {}: {}]", if r.passed { "ok" } else { "failed" }, r.name, r.detail))
        .collect();
    if let Some(b) = budget_s {
        detail.push(format!("elapsed {elapsed:.2}s (budget {b}s)"));
    }
    Outcome {
        passed: all && in_budget,
        detail: detail.join(" "),
    }
}

fn ok_rows(result: &SweepResult) -> impl Iterator<Item = (&sweep::SweepRow, &experiment::RunSummary)> {
    result.rows.iter().filter_map(|r| r.outcome.as_ref().ok().map(|s| (r, s)))
}

fn axis(cell: &[serde_json::Value], i: usize) -> f64 {
    cell[i].as_f64().expect("numeric axis")
}

/// Per cell and label, the mean of `f` over seeds.
fn cell_means(result: &SweepResult, f: impl Fn(&experiment::RunSummary) -> f64) -> BTreeMap<(usize, String), f64> {
    let mut acc: BTreeMap<(usize, String), (f64, usize)> = BTreeMap::new();
    for (row, s) in ok_rows(result) {
        let e = acc.entry((row.cell, row.label.clone())).or_default();
        e.0 += f(s);
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect()
}

fn criterion_6(manifest: &Manifest, result: &SweepResult) -> Outcome {
    let failed = result.rows.iter().filter(|r| r.outcome.is_err()).count();
    let mut trend_ok = true;
    let mut parts = Vec::new();
    let mut slopes = BTreeMap::new();
    for v in &manifest.variants {
        let (x, y): (Vec<f64>, Vec<f64>) = ok_rows(result)
            .filter(|(r, _)| r.label == v.label)
            .map(|(r, s)| {
                let cell = &result.cells[r.cell];
                (axis(cell, 0) - axis(cell, 1), s.test_accuracy)
            })
            .unzip();
        let sp = spearman(&x, &y);
        let (slope, _) = linear_fit(&x, &y);
        slopes.insert(v.label.clone(), slope);
        trend_ok &= sp.rho < 0.0 && sp.p_negative < 0.05;
        parts.push(format!(
            "{}: rho(acc, U1-S) {:.3} p {:.2e} n {} slope {:.4}",
            v.label, sp.rho, sp.p_negative, sp.n, slope
        ));
    }
    let means = cell_means(result, |s| s.test_accuracy);
    let n_cells = result.cells.len();
    let wins = (0..n_cells)
        .filter(|&c| {
            match (means.get(&(c, "mcr-greedy".into())), means.get(&(c, "joint".into()))) {
                (Some(m), Some(j)) => m >= j,
                _ => false,
            }
        })
        .count();
    let wins_ok = wins as f64 >= 0.75 * n_cells as f64;
    let slope_ok = slopes["mcr-greedy"] > slopes["joint"];
    Outcome {
        passed: trend_ok && wins_ok && slope_ok && failed == 0,
        detail: format!(
            "{}x{} grid, {} runs ({failed} failed); (a) {} -> {}; (b) MCR >= Joint on {wins}/{n_cells} cells -> {}; (c) slope MCR {:.4} vs Joint {:.4} -> {}",
            manifest.grid[0].values.len(),
            manifest.grid[1].values.len(),
            result.rows.len(),
            parts.join("; "),
            if trend_ok { "ok" } else { "not met" },
            if wins_ok { "ok" } else { "not met" },
            slopes["mcr-greedy"],
            slopes["joint"],
            if slope_ok { "ok" } else { "not met" },
        ),
    }
}

fn criterion_9(result: &SweepResult) -> (Outcome, Outcome) {
    let mut sums_ok = true;
    let mut checked = 0;
    for (row, s) in ok_rows(result) {
        let n_test = row.experiment.data.n_test;
        match &s.error_matrix {
            Some(em) => {
                sums_ok &= em.total() == n_test;
                checked += 1;
            }
            None => sums_ok = false,
        }
    }
    let rescued = cell_means(result, |s| s.error_matrix.as_ref().map_or(f64::NAN, |e| e.rescued() as f64));
    let n_cells = result.cells.len();
    let wins = (0..n_cells)
        .filter(|&c| {
            match (rescued.get(&(c, "mcr-greedy".into())), rescued.get(&(c, "joint".into()))) {
                (Some(m), Some(j)) => m >= j,
                _ => false,
            }
        })
        .count();
    let accounting = Outcome {
        passed: sums_ok && checked > 0,
        detail: format!("{checked} error matrices, every one sums to the test-set size: {sums_ok}"),
    };
    let comparison = Outcome {
        passed: 2 * wins > n_cells,
        detail: format!("MCR rescued count (multimodal correct, >=1 unimodal correct) >= Joint's on {wins}/{n_cells} cells"),
    };
    (accounting, comparison)
}

fn collapse_experiment(method: Method, seed: u64) -> Experiment {
    let mut run = RunConfig::new(method);
    run.mcr.strategy = Strategy::Greedy;
    run.probe = true;
    run.seed = seed;
    Experiment {
        data: SyntheticSpec {
            shared_frac: 0.1,
            unique_frac_1: 0.6,
            unique_frac_2: 0.2,
            seed,
            ..Default::default()
        },
        run,
    }
}

fn criterion_7() -> Outcome {
    let mut seed_pass = 0;
    let mut parts = Vec::new();
    for seed in 0..3u64 {
        let joint = experiment::run(&collapse_experiment(Method::Joint, seed), None, false).expect("joint run");
        let mcr = experiment::run(&collapse_experiment(Method::Mcr, seed), None, false).expect("mcr run");
        let recs = &joint.output.records;
        let near_chance = recs.iter().filter(|r| (r.probe_accuracy[1] - CHANCE).abs() <= 0.03).count();
        let tracks = recs.iter().filter(|r| (r.probe_accuracy[0] - r.test_accuracy).abs() <= 0.05).count();
        let weak_mean = recs.iter().map(|r| r.probe_accuracy[1]).sum::<f64>() / recs.len() as f64;
        let mcr_final = mcr.output.records.last().expect("epochs").probe_accuracy[1];
        let collapse = near_chance as f64 >= 0.8 * recs.len() as f64;
        let track_ok = tracks as f64 >= 0.8 * recs.len() as f64;
        let lift = mcr_final >= CHANCE + 0.10;
        let ok = collapse && track_ok && lift;
        seed_pass += usize::from(ok);
        parts.push(format!(
            "seed {seed}: joint weak probe within 3pt of chance {near_chance}/{n} epochs (mean {weak_mean:.3}), strong probe within 5pt of multimodal {tracks}/{n}, MCR final weak probe {mcr_final:.3}",
            n = recs.len()
        ));
    }
    Outcome {
        passed: seed_pass >= 2,
        detail: format!("U1=0.6 S=0.1 U2=0.2, {seed_pass}/3 seeds meet all three conditions; {}", parts.join("; ")),
    }
}

fn criterion_8(result: &SweepResult) -> Outcome {
    let mut by_label: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (row, s) in ok_rows(result) {
        by_label.entry(row.label.as_str()).or_default().push(s.test_accuracy);
    }
    let stats: BTreeMap<&str, (f64, f64, usize)> = by_label
        .iter()
        .map(|(k, v)| {
            let (m, sd) = sweep::mean_std(v);
            (*k, (m, sd, v.len()))
        })
        .collect();
    let greedy = stats.get("greedy").map_or(f64::NAN, |s| s.0);
    let collab = stats.get("collaborative").map_or(f64::NAN, |s| s.0);
    let text: Vec<String> = stats
        .iter()
        .map(|(k, (m, sd, n))| format!("{k} {m:.4} +/- {sd:.4} (n={n})"))
        .collect();
    Outcome {
        passed: greedy >= collab,
        detail: format!("test accuracy over seeds: {}; greedy >= collaborative: {}", text.join(", "), greedy >= collab),
    }
}

fn criterion_10() -> Outcome {
    let mut exp = collapse_experiment(Method::Mcr, 7);
    exp.data.n_train = 300;
    exp.data.n_val = 100;
    exp.data.n_test = 100;
    exp.run.optimizer.epochs = 3;
    let a = experiment::run(&exp, None, true).expect("run a");
    let b = experiment::run(&exp, None, true).expect("run b");
    let run_same = a.csv.render() == b.csv.render();

    let mut m = sweep::strategy_manifest(vec![0, 1]);
    m.base["data"]["n_train"] = 200.into();
    m.base["data"]["n_val"] = 60.into();
    m.base["data"]["n_test"] = 60.into();
    m.base["run"]["optimizer"]["epochs"] = 2.into();
    let s1 = sweep::run_sweep(&m, 1).expect("sweep");
    let s2 = sweep::run_sweep(&m, jobs().max(2)).expect("sweep");
    let render = |r: &SweepResult| {
        (
            sweep::rows_csv(&m, r).expect("rows").render(),
            sweep::aggregate_csv(&m, r).expect("aggregate").render(),
        )
    };
    let sweep_same = render(&s1) == render(&s2);
    Outcome {
        passed: run_same && sweep_same,
        detail: format!(
            "MCR run repeated: epoch CSV bit-identical {run_same}; strategy sweep with 1 vs {} workers: rows and aggregate CSV bit-identical {sweep_same}",
            jobs().max(2)
        ),
    }
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut exact_failures = Vec::new();
    let mut record = |id: usize, name: &str, exact: bool, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        line(id, name, &o, start.elapsed().as_secs_f64());
        if exact && !o.passed {
            exact_failures.push(id);
        }
    };

    record(1, "gradient finite differences", true, &mut || verify_checks("gradcheck", Some(60.0)));
    record(2, "equilibrium-gradient identity", true, &mut || verify_checks("equilibrium-identity", None));
    record(3, "MI decomposition identity", true, &mut || verify_checks("mi-identity", None));
    record(4, "contrastive bound", true, &mut || verify_checks("contrastive-bound", None));
    record(5, "perturbation cost", true, &mut || verify_checks("cost-invariants", None));

    let grid = sweep::grid_manifest(vec![0, 1, 2]);
    let start = Instant::now();
    let grid_result = sweep::run_sweep(&grid, jobs()).expect("grid sweep");
    let grid_seconds = start.elapsed().as_secs_f64();
    println!("grid sweep: {} runs in {grid_seconds:.1}s", grid_result.rows.len());
    record(6, "accuracy trend over the (U1, S) grid", false, &mut || criterion_6(&grid, &grid_result));
    record(7, "weak-modality collapse and recovery", false, &mut criterion_7);

    let strategies = sweep::strategy_manifest((0..5).collect());
    let strategy_result = sweep::run_sweep(&strategies, jobs()).expect("strategy sweep");
    record(8, "strategy ablation", false, &mut || criterion_8(&strategy_result));

    let (accounting, comparison) = criterion_9(&grid_result);
    record(9, "error matrix accounting", true, &mut || Outcome {
        passed: accounting.passed,
        detail: accounting.detail.clone(),
    });
    record(9, "error matrix MCR vs Joint", false, &mut || Outcome {
        passed: comparison.passed,
        detail: comparison.detail.clone(),
    });
    record(10, "determinism", true, &mut criterion_10);

    if !exact_failures.is_empty() {
        eprintln!("exact criteria failed: {exact_failures:?}");
        std::process::exit(1);
    }
}
