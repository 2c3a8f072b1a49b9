//! The `mcr` command line.
//!
//! Exit codes: 0 success, 1 verification or run failure, 2 usage or
//! configuration error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;
use serde_json::{json, Value};

use crate::analysis::{linear_fit, spearman};
use crate::error::{Error, Result};
use crate::experiment::{self, Experiment, RunSummary};
use crate::io::{self, Csv};
use crate::sweep::{self, Manifest};
use crate::synthdata::{generate, SyntheticData, SyntheticSpec};
use crate::trainer::{latents, linear_probe};
use crate::verify::{self, VerifyOptions};

pub const OUTPUT_ROOT_ENV: &str = "MCR_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "mcr-out";

#[derive(Debug, Parser)]
#[command(name = "mcr", version, about = "Multimodal competition regularizer lab")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Refuse to replace existing files whose contents would change.
    #[arg(long, global = true)]
    pub no_clobber: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Generate(GenerateArgs),
    /// Train one configuration.
    Train(TrainArgs),
    /// Run a grid or ablation sweep.
    Sweep(SweepArgs),
    /// Linear probes on a trained run's per-modality latents.
    Probe(ProbeArgs),
    /// Run the property suite.
    Verify(VerifyArgs),
    /// Summarize a run or sweep directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// JSON dataset spec; defaults apply to missing keys.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Override a spec key, e.g. `--set shared_frac=0.4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// File stem of the container and sidecar.
    #[arg(long, default_value = "dataset")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON experiment: `{"data": {...}, "run": {...}}`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset container to train on instead of generating from `data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Override a key; paths without a `data.`/`run.` prefix refer to `run`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also train unimodal references and record the error matrix.
    #[arg(long)]
    pub error_matrix: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    /// Accuracy over the (U1, S) grid, joint vs greedy MCR.
    Grid,
    /// Collaborative, independent and greedy MCR.
    Strategies,
    /// MCR loss-term combinations.
    Components,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// JSON sweep manifest.
    #[arg(long, conflicts_with = "preset")]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Seeds, comma separated; replaces the manifest's list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Override a manifest key, e.g. `--set base.run.optimizer.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the resolved manifest and exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Run directory written by `mcr train`.
    pub run: PathBuf,
    /// Dataset container; regenerated from the run's config when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Only checks whose name contains this text.
    #[arg(long)]
    pub filter: Option<String>,
    /// Mutation canary: routes greedy gradients with the wrong sign.
    #[arg(long)]
    pub flip_greedy_sign: bool,
    /// List check names and exit.
    #[arg(long)]
    pub list: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory (with summary.json) or sweep directory (with rows.csv).
    pub path: PathBuf,
}

/// Turns `--a.b=v` and `--a.b v` into `--set a.b=v`.
pub fn rewrite_dotted_flags<I: IntoIterator<Item = String>>(args: I) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            out.push(a);
            continue;
        };
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !key.contains('.') {
            out.push(a);
            continue;
        }
        let value = match value {
            Some(v) => v,
            None => match it.next() {
                Some(v) => v,
                None => {
                    out.push(a);
                    continue;
                }
            },
        };
        out.push("--set".into());
        out.push(format!("{key}={value}"));
    }
    out
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Json(_)
        | Error::Io(_)
        | Error::Format(_)
        | Error::Modality { .. }
        | Error::LabelOutOfRange { .. }
        | Error::SupportTooLarge { .. } => 2,
        _ => 1,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let cli = match Cli::try_parse_from(rewrite_dotted_flags(args)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    io::set_no_clobber(cli.no_clobber);
    let res = match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Report(a) => cmd_report(a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn parse_doc<T: serde::de::DeserializeOwned>(doc: Value, what: &str) -> Result<T> {
    serde_json::from_value(doc).map_err(|e| Error::Config(format!("invalid {what}: {e}")))
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

/// Test accuracy of a linear probe on each modality's raw inputs.
fn raw_informativeness(data: &SyntheticData) -> Result<Vec<f64>> {
    (0..data.train.x.len())
        .map(|m| {
            linear_probe(
                &data.train.x[m],
                &data.train.y,
                &data.test.x[m],
                &data.test.y,
                data.spec.n_classes,
            )
        })
        .collect()
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<i32> {
    let mut doc = match &a.spec {
        Some(p) => read_json(p)?,
        None => json!({}),
    };
    let set: Vec<String> = a
        .set
        .iter()
        .map(|s| s.strip_prefix("data.").unwrap_or(s).to_string())
        .collect();
    io::apply_overrides(&mut doc, &set)?;
    let spec: SyntheticSpec = parse_doc(doc, "dataset spec")?;
    spec.validate()?;
    let data = generate(&spec)?;
    let dir = a.out.clone().unwrap_or_else(|| output_root().join("data"));
    io::save_dataset(&data, &dir, &a.name)?;
    let hash = io::config_hash(&spec)?;
    println!("wrote {}", dir.join(format!("{}.bin", a.name)).display());
    println!("wrote {}", dir.join(format!("{}.json", a.name)).display());
    println!("config_hash={hash} seed={}", spec.seed);
    println!(
        "rows: train {} val {} test {}; fractions S={} U1={} U2={}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        spec.shared_frac,
        spec.unique_frac_1,
        spec.unique_frac_2
    );
    for (m, acc) in raw_informativeness(&data)?.iter().enumerate() {
        println!(
            "modality {}: raw-input linear probe test accuracy {acc:.4} (chance {:.4})",
            m + 1,
            1.0 / spec.n_classes as f64
        );
    }
    Ok(0)
}

fn train_key(k: &str) -> String {
    if k.starts_with("data.") || k.starts_with("run.") {
        k.to_string()
    } else {
        format!("run.{k}")
    }
}

/// Experiment document from the config file and overrides.
pub fn load_experiment(config: Option<&Path>, set: &[String]) -> Result<Experiment> {
    let mut doc = match config {
        Some(p) => read_json(p)?,
        None => json!({"run": {"method": "joint"}}),
    };
    let set: Vec<String> = set
        .iter()
        .map(|s| match s.split_once('=') {
            Some((k, v)) => format!("{}={v}", train_key(k.trim())),
            None => s.clone(),
        })
        .collect();
    io::apply_overrides(&mut doc, &set)?;
    let exp: Experiment = parse_doc(doc, "experiment")?;
    exp.validate()?;
    Ok(exp)
}

pub fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let mut exp = load_experiment(a.config.as_deref(), &a.set)?;
    let loaded = match &a.data {
        Some(p) => {
            if !p.exists() {
                return Err(Error::Config(format!("dataset {} does not exist", p.display())));
            }
            let d = io::load_dataset(p)?;
            exp.data = d.spec.clone();
            Some(d)
        }
        None => None,
    };
    let art = experiment::run(&exp, loaded.as_ref(), a.error_matrix)?;
    let hash = art.summary.config_hash.clone();
    let dir = a
        .out
        .clone()
        .unwrap_or_else(|| output_root().join("runs").join(format!("{}-{}", exp.run.method, short(&hash))));
    experiment::write_artifacts(&exp, &art, &dir)?;
    print_summary(&art.summary);
    println!("wrote {}", dir.display());
    Ok(0)
}

fn print_summary(s: &RunSummary) {
    println!("method {} seed {} config_hash={}", s.method, s.seed, s.config_hash);
    println!(
        "test accuracy {:.4}  best val accuracy {:.4}  epochs {}  best {:?}",
        s.test_accuracy, s.best_val_accuracy, s.epochs_run, s.best_epochs
    );
    println!("mce (test nll - train nll) {:.4} nats", s.mce);
    if let (Some(imp), Some(sum)) = (s.importance.last(), s.importance_sum.last()) {
        let text: Vec<String> = imp.iter().map(|v| format!("{v:.4}")).collect();
        println!("final importance [{}] sum {sum:.4} nats", text.join(", "));
    }
    if let Some(p) = s.probe_accuracy.last().filter(|p| !p.is_empty()) {
        let text: Vec<String> = p.iter().map(|v| format!("{v:.4}")).collect();
        println!("final probe accuracy [{}]", text.join(", "));
    }
    if let Some(em) = &s.error_matrix {
        println!(
            "error matrix by #unimodal correct: mm correct {:?} mm incorrect {:?} (rescued {})",
            em.correct,
            em.incorrect,
            em.rescued()
        );
    }
    println!(
        "encoder passes {:?} fusion passes {} steps {}",
        s.cost.encoder_passes, s.cost.fusion_passes, s.steps
    );
}

pub fn resolve_manifest(a: &SweepArgs) -> Result<Manifest> {
    let seeds = if a.seeds.is_empty() { vec![0] } else { a.seeds.clone() };
    let mut doc = match (&a.manifest, a.preset) {
        (Some(p), _) => read_json(p)?,
        (None, Some(Preset::Grid)) => serde_json::to_value(sweep::grid_manifest(seeds.clone()))?,
        (None, Some(Preset::Strategies)) => serde_json::to_value(sweep::strategy_manifest(seeds.clone()))?,
        (None, Some(Preset::Components)) => serde_json::to_value(sweep::component_manifest(seeds.clone()))?,
        (None, None) => return Err(Error::Config("give --manifest or --preset".into())),
    };
    if a.manifest.is_some() && !a.seeds.is_empty() {
        doc["seeds"] = json!(a.seeds);
    }
    io::apply_overrides(&mut doc, &a.set)?;
    let m: Manifest = parse_doc(doc, "manifest")?;
    m.validate()?;
    Ok(m)
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<i32> {
    let manifest = resolve_manifest(a)?;
    if a.dry_run {
        println!("{}", serde_json::to_string_pretty(&manifest)?);
        return Ok(0);
    }
    let result = sweep::run_sweep(&manifest, a.jobs)?;
    let name = if manifest.name.is_empty() { "sweep" } else { manifest.name.as_str() };
    let dir = a
        .out
        .clone()
        .unwrap_or_else(|| output_root().join("sweeps").join(format!("{name}-{}", short(&result.manifest_hash))));
    sweep::write_sweep(&manifest, &result, &dir)?;
    let failed = result.rows.iter().filter(|r| r.outcome.is_err()).count();
    println!(
        "{} runs ({} failed), manifest config_hash={}",
        result.rows.len(),
        failed,
        result.manifest_hash
    );
    print!("{}", render_table(&sweep::aggregate_csv(&manifest, &result)?));
    println!("wrote {}", dir.display());
    Ok(if failed > 0 { 1 } else { 0 })
}

pub fn cmd_probe(a: &ProbeArgs) -> Result<i32> {
    let exp: Experiment = parse_doc(read_json(&a.run.join("config.json"))?, "run config")?;
    let model = io::load_checkpoint(&io::Container::read(&a.run.join("checkpoint.bin"))?)?;
    let data = match &a.data {
        Some(p) => io::load_dataset(p)?,
        None => generate(&exp.data)?,
    };
    let train_z = latents(&model, &data.train)?;
    let test_z = latents(&model, &data.test)?;
    println!("config_hash={} seed={}", exp.config_hash()?, exp.run.seed);
    for m in 0..train_z.len() {
        let acc = linear_probe(&train_z[m], &data.train.y, &test_z[m], &data.test.y, data.spec.n_classes)?;
        println!(
            "modality {}: latent linear probe test accuracy {acc:.4} (chance {:.4})",
            m + 1,
            1.0 / data.spec.n_classes as f64
        );
    }
    Ok(0)
}

pub fn cmd_verify(a: &VerifyArgs) -> Result<i32> {
    if a.list {
        for n in verify::check_names() {
            println!("{n}");
        }
        return Ok(0);
    }
    let opts = VerifyOptions {
        filter: a.filter.clone(),
        flip_greedy_sign: a.flip_greedy_sign,
    };
    let results = verify::run_checks(&opts);
    if results.is_empty() {
        return Err(Error::Config(format!("no check matches filter {:?}", a.filter)));
    }
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    println!("{}/{} checks passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        Ok(0)
    } else {
        println!("failing: {}", failed.join(", "));
        Ok(1)
    }
}

fn render_table(csv: &Csv) -> String {
    let mut widths: Vec<usize> = csv.header.iter().map(String::len).collect();
    let shorten = |s: &str| -> String {
        match s.parse::<f64>() {
            Ok(v) if s.contains('.') => format!("{v:.4}"),
            _ => s.to_string(),
        }
    };
    let rows: Vec<Vec<String>> = csv.rows.iter().map(|r| r.iter().map(|c| shorten(c)).collect()).collect();
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| -> String {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut s = line(&csv.header);
    s.push('\n');
    for r in &rows {
        s.push_str(&line(r));
        s.push('\n');
    }
    s
}

/// Rank correlation and fitted slope of accuracy against `U1 - S` per
/// method, from a sweep's `rows.csv`.
pub fn grid_trends(rows: &Csv) -> Option<Vec<(String, f64, f64, f64)>> {
    let col = |name: &str| rows.header.iter().position(|h| h == name);
    let (u1, s, method, acc, status) = (col("U1")?, col("S")?, col("method")?, col("accuracy")?, col("status")?);
    let mut labels: Vec<String> = Vec::new();
    for r in &rows.rows {
        if !labels.contains(&r[method]) {
            labels.push(r[method].clone());
        }
    }
    let out = labels
        .into_iter()
        .map(|label| {
            let pts: Vec<(f64, f64)> = rows
                .rows
                .iter()
                .filter(|r| r[method] == label && r[status] == "ok")
                .filter_map(|r| {
                    let x = r[u1].parse::<f64>().ok()? - r[s].parse::<f64>().ok()?;
                    Some((x, r[acc].parse().ok()?))
                })
                .collect();
            let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let sp = spearman(&x, &y);
            (label, sp.rho, sp.p_negative, linear_fit(&x, &y).0)
        })
        .collect();
    Some(out)
}

pub fn cmd_report(a: &ReportArgs) -> Result<i32> {
    let summary = a.path.join("summary.json");
    if summary.exists() {
        let s: RunSummary = parse_doc(read_json(&summary)?, "summary")?;
        print_summary(&s);
        let epochs = Csv::parse(&std::fs::read_to_string(a.path.join("epochs.csv"))?)?;
        let keep = ["epoch", "phase", "train_total", "val_accuracy", "test_accuracy", "importance_sum", "probe_1", "probe_2"];
        let idx: Vec<usize> = keep
            .iter()
            .filter_map(|k| epochs.header.iter().position(|h| h == k))
            .collect();
        let slim = Csv {
            config_hash: epochs.config_hash.clone(),
            seed: epochs.seed.clone(),
            header: idx.iter().map(|&i| epochs.header[i].clone()).collect(),
            rows: epochs.rows.iter().map(|r| idx.iter().map(|&i| r[i].clone()).collect()).collect(),
        };
        print!("{}", render_table(&slim));
        return Ok(0);
    }
    let rows_path = a.path.join("rows.csv");
    if !rows_path.exists() {
        return Err(Error::Config(format!(
            "{} has neither summary.json nor rows.csv",
            a.path.display()
        )));
    }
    let agg = Csv::parse(&std::fs::read_to_string(a.path.join("aggregate.csv"))?)?;
    println!("config_hash={} seeds={}", agg.config_hash, agg.seed);
    print!("{}", render_table(&agg));
    let rows = Csv::parse(&std::fs::read_to_string(&rows_path)?)?;
    if let Some(trends) = grid_trends(&rows) {
        for (label, rho, p, slope) in trends {
            println!("{label}: spearman(accuracy, U1-S) {rho:.4} (one-sided p {p:.4}), slope {slope:.4}");
        }
    }
    let failed = rows.rows.iter().filter(|r| r.iter().any(|c| c == "failed")).count();
    if failed > 0 {
        warn!("{failed} runs failed");
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Method;

    fn args(s: &[&str]) -> Vec<String> {
        s.iter().map(|v| v.to_string()).collect()
    }

    #[test]
    fn dotted_flags_become_overrides() {
        let got = rewrite_dotted_flags(args(&[
            "mcr",
            "train",
            "--optimizer.lr=0.001",
            "--mcr.strategy",
            "greedy",
            "--error-matrix",
        ]));
        assert_eq!(
            got,
            args(&["mcr", "train", "--set", "optimizer.lr=0.001", "--set", "mcr.strategy=greedy", "--error-matrix"])
        );
    }

    #[test]
    fn overrides_default_to_run_section() {
        let exp = load_experiment(None, &args(&["optimizer.lr=0.5", "data.shared_frac=0.4", "method=mcr"])).unwrap();
        assert_eq!(exp.run.optimizer.lr, 0.5);
        assert_eq!(exp.data.shared_frac, 0.4);
        assert_eq!(exp.run.method, Method::Mcr);
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(args(&["mcr", "no-such-command"])), 2);
        assert_eq!(run(args(&["mcr", "verify", "--filter", "nothing-matches"])), 2);
    }

    #[test]
    fn grid_trends_read_rows() {
        let mut c = Csv::new("h", 0, &["U1", "S", "method", "status", "accuracy"]);
        for (u1, s, acc) in [(0.1, 0.4, 0.9), (0.4, 0.1, 0.5), (0.2, 0.2, 0.7)] {
            c.push(args(&[&u1.to_string(), &s.to_string(), "joint", "ok", &acc.to_string()]))
                .unwrap();
        }
        let t = grid_trends(&c).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].1, -1.0);
        assert!(t[0].3 < 0.0);
    }
}
