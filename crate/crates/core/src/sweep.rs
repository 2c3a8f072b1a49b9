//! Grid sweeps over experiments: every (cell, variant, seed) combination is
//! one run. Rows come back in that order whatever the worker count.

use std::collections::BTreeMap;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::experiment::{self, Experiment, RunSummary};
use crate::io::{self, fmt_f64, Csv};
use crate::synthdata::generate;

/// One method column of the sweep: a label plus dotted overrides applied to
/// the base experiment document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub label: String,
    #[serde(default)]
    pub overrides: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    /// Dotted path into the experiment document, e.g. `data.unique_frac_1`.
    pub key: String,
    /// Column name in the output tables; defaults to `key`.
    #[serde(default)]
    pub name: Option<String>,
    pub values: Vec<Value>,
}

impl Axis {
    pub fn column(&self) -> &str {
        self.name.as_deref().unwrap_or(&self.key)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub name: String,
    /// Experiment document (`{"data": ..., "run": ...}`) shared by all runs.
    #[serde(default)]
    pub base: Value,
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub grid: Vec<Axis>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Also train one unimodal model per modality for every (cell, seed)
    /// and fill the error-matrix columns.
    #[serde(default)]
    pub error_matrix: bool,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// One grid point: the axis values in axis order.
pub type Cell = Vec<Value>;

#[derive(Debug, Clone)]
pub struct Job {
    pub cell: usize,
    pub variant: usize,
    pub seed: u64,
    pub experiment: Experiment,
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub cell: usize,
    pub label: String,
    pub seed: u64,
    pub experiment: Experiment,
    pub outcome: std::result::Result<RunSummary, String>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub manifest_hash: String,
    pub cells: Vec<Cell>,
    pub rows: Vec<SweepRow>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("manifest needs at least one variant".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("manifest needs at least one seed".into()));
        }
        let mut labels: Vec<&str> = self.variants.iter().map(|v| v.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("variant labels must be unique".into()));
        }
        if let Some(a) = self.grid.iter().find(|a| a.values.is_empty()) {
            return Err(Error::Config(format!("grid axis `{}` has no values", a.key)));
        }
        for name in labels.iter().copied().chain(self.grid.iter().map(Axis::column)) {
            if name.is_empty() || name.contains([',', '\n', '"']) {
                return Err(Error::Config(format!("bad label or column name `{name}`")));
            }
        }
        Ok(())
    }

    /// Cartesian product of the axes, first axis slowest.
    pub fn cells(&self) -> Vec<Cell> {
        self.grid.iter().fold(vec![Vec::new()], |acc, axis| {
            acc.into_iter()
                .flat_map(|c| {
                    axis.values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push(v.clone());
                        c
                    })
                })
                .collect()
        })
    }

    fn document(&self, cell: &Cell, variant: Option<&Variant>, seed: u64) -> Result<Value> {
        let mut doc = if self.base.is_null() { json!({}) } else { self.base.clone() };
        for (axis, v) in self.grid.iter().zip(cell) {
            io::set_dotted(&mut doc, &axis.key, v.clone())?;
        }
        if let Some(variant) = variant {
            for (k, v) in &variant.overrides {
                io::set_dotted(&mut doc, k, v.clone())?;
            }
        }
        io::set_dotted(&mut doc, "data.seed", json!(seed))?;
        io::set_dotted(&mut doc, "run.seed", json!(seed))?;
        Ok(doc)
    }

    pub fn experiment(&self, cell: &Cell, variant: Option<&Variant>, seed: u64) -> Result<Experiment> {
        let doc = self.document(cell, variant, seed)?;
        let exp: Experiment = serde_json::from_value(doc).map_err(|e| {
            Error::Config(format!(
                "variant `{}`: {e}",
                variant.map_or("<base>", |v| v.label.as_str())
            ))
        })?;
        exp.validate()?;
        Ok(exp)
    }

    /// All runs in output order. Fails before any training if a config is
    /// invalid.
    pub fn jobs(&self) -> Result<Vec<Job>> {
        self.validate()?;
        let mut jobs = Vec::new();
        for (ci, cell) in self.cells().iter().enumerate() {
            for (vi, variant) in self.variants.iter().enumerate() {
                for &seed in &self.seeds {
                    jobs.push(Job {
                        cell: ci,
                        variant: vi,
                        seed,
                        experiment: self.experiment(cell, Some(variant), seed)?,
                    });
                }
            }
        }
        Ok(jobs)
    }
}

fn one_line(e: &Error) -> String {
    e.to_string().replace([',', '\n', '"'], ";")
}

pub fn run_sweep(manifest: &Manifest, jobs: usize) -> Result<SweepResult> {
    let list = manifest.jobs()?;
    let cells = manifest.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    info!("sweep `{}`: {} runs on {} workers", manifest.name, list.len(), jobs.max(1));

    let references: BTreeMap<(usize, u64), std::result::Result<Vec<Vec<usize>>, String>> = if manifest.error_matrix {
        let keys: Vec<(usize, u64)> = (0..cells.len())
            .flat_map(|c| manifest.seeds.iter().map(move |&s| (c, s)))
            .collect();
        let refs: Vec<_> = pool.install(|| {
            keys.par_iter()
                .map(|&(c, s)| {
                    let r = manifest.experiment(&cells[c], None, s).and_then(|exp| {
                        let data = generate(&exp.data)?;
                        experiment::unimodal_reference(&exp.run, &data)
                    });
                    ((c, s), r.map_err(|e| one_line(&e)))
                })
                .collect()
        });
        refs.into_iter().collect()
    } else {
        BTreeMap::new()
    };

    let rows: Vec<SweepRow> = pool.install(|| {
        list.par_iter()
            .map(|job| {
                let outcome = (|| -> std::result::Result<RunSummary, String> {
                    let reference = match references.get(&(job.cell, job.seed)) {
                        Some(Ok(r)) => Some(r),
                        Some(Err(e)) => return Err(format!("unimodal reference failed: {e}")),
                        None => None,
                    };
                    let exp = &job.experiment;
                    let data = generate(&exp.data).map_err(|e| one_line(&e))?;
                    let out = crate::trainer::train(&exp.run, experiment::splits(&data)).map_err(|e| one_line(&e))?;
                    experiment::summarize(exp, &data, &out, reference.map(Vec::as_slice)).map_err(|e| one_line(&e))
                })();
                if let Err(e) = &outcome {
                    warn!("cell {} `{}` seed {}: {e}", job.cell, manifest.variants[job.variant].label, job.seed);
                }
                SweepRow {
                    cell: job.cell,
                    label: manifest.variants[job.variant].label.clone(),
                    seed: job.seed,
                    experiment: job.experiment.clone(),
                    outcome,
                }
            })
            .collect()
    });
    Ok(SweepResult {
        manifest_hash: io::config_hash(manifest)?,
        cells,
        rows,
    })
}

/// Importance and probe accuracy at the epoch whose weights were kept.
fn kept_epoch(s: &RunSummary) -> usize {
    s.best_epochs.last().copied().unwrap_or(0).min(s.importance.len().saturating_sub(1))
}

pub const N_MODALITIES: usize = 2;

fn cell_columns(manifest: &Manifest) -> Vec<String> {
    manifest.grid.iter().map(|a| a.column().to_string()).collect()
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn rows_header(manifest: &Manifest) -> Vec<String> {
    let mut h = vec!["cell".to_string()];
    h.extend(cell_columns(manifest));
    h.extend(["method", "kind", "seed", "status", "accuracy", "val_accuracy", "mce"].map(String::from));
    h.extend((1..=N_MODALITIES).map(|i| format!("importance_{i}")));
    h.push("importance_sum".into());
    h.extend((1..=N_MODALITIES).map(|i| format!("probe_{i}")));
    h.extend((0..=N_MODALITIES).map(|k| format!("em_correct_{k}")));
    h.extend((0..=N_MODALITIES).map(|k| format!("em_incorrect_{k}")));
    h.extend(["rescued", "epochs", "steps", "encoder_passes", "fusion_passes", "config_hash", "error"].map(String::from));
    h
}

fn seeds_text(m: &Manifest) -> String {
    m.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";")
}

pub fn rows_csv(manifest: &Manifest, result: &SweepResult) -> Result<Csv> {
    let header = rows_header(manifest);
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = Csv::new(&result.manifest_hash, seeds_text(manifest), &refs);
    let blank = |n: usize| vec![String::new(); n];
    for r in &result.rows {
        let mut row = vec![r.cell.to_string()];
        row.extend(result.cells[r.cell].iter().map(value_text));
        row.push(r.label.clone());
        row.push(r.experiment.run.method.to_string());
        row.push(r.seed.to_string());
        match &r.outcome {
            Ok(s) => {
                let e = kept_epoch(s);
                row.push("ok".into());
                row.extend([s.test_accuracy, s.best_val_accuracy, s.mce].map(fmt_f64));
                let imp = s.importance.get(e).cloned().unwrap_or_default();
                row.extend((0..N_MODALITIES).map(|i| io::fmt_opt(imp.get(i).copied())));
                row.push(io::fmt_opt(s.importance_sum.get(e).copied()));
                let probe = s.probe_accuracy.get(e).cloned().unwrap_or_default();
                row.extend((0..N_MODALITIES).map(|i| io::fmt_opt(probe.get(i).copied())));
                match &s.error_matrix {
                    Some(em) => {
                        row.extend(em.correct.iter().map(usize::to_string));
                        row.extend(em.incorrect.iter().map(usize::to_string));
                        row.push(em.rescued().to_string());
                    }
                    None => row.extend(blank(2 * (N_MODALITIES + 1) + 1)),
                }
                row.push(s.epochs_run.to_string());
                row.push(s.steps.to_string());
                row.push(s.cost.total_encoder_passes().to_string());
                row.push(s.cost.fusion_passes.to_string());
                row.push(s.config_hash.clone());
                row.push(String::new());
            }
            Err(e) => {
                row.push("failed".into());
                row.extend(blank(header.len() - row.len() - 2));
                row.push(r.experiment.config_hash()?);
                row.push(e.clone());
            }
        }
        csv.push(row)?;
    }
    Ok(csv)
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and sample standard deviation per (cell, variant) over the
/// successful seeds.
pub fn aggregate_csv(manifest: &Manifest, result: &SweepResult) -> Result<Csv> {
    let mut header = vec!["cell".to_string()];
    header.extend(cell_columns(manifest));
    header.extend(
        [
            "method",
            "n_ok",
            "n_failed",
            "accuracy_mean",
            "accuracy_std",
            "mce_mean",
            "mce_std",
            "importance_sum_mean",
            "rescued_mean",
        ]
        .map(String::from),
    );
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = Csv::new(&result.manifest_hash, seeds_text(manifest), &refs);
    for (ci, cell) in result.cells.iter().enumerate() {
        for v in &manifest.variants {
            let rows: Vec<&SweepRow> = result.rows.iter().filter(|r| r.cell == ci && r.label == v.label).collect();
            let ok: Vec<&RunSummary> = rows.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
            let acc = mean_std(&ok.iter().map(|s| s.test_accuracy).collect::<Vec<_>>());
            let mce = mean_std(&ok.iter().map(|s| s.mce).collect::<Vec<_>>());
            let imp = mean_std(
                &ok.iter()
                    .filter_map(|s| s.importance_sum.get(kept_epoch(s)).copied())
                    .collect::<Vec<_>>(),
            );
            let rescued: Vec<f64> = ok
                .iter()
                .filter_map(|s| s.error_matrix.as_ref().map(|e| e.rescued() as f64))
                .collect();
            let mut row = vec![ci.to_string()];
            row.extend(cell.iter().map(value_text));
            row.push(v.label.clone());
            row.push(ok.len().to_string());
            row.push((rows.len() - ok.len()).to_string());
            row.extend([acc.0, acc.1, mce.0, mce.1, imp.0].map(fmt_f64));
            row.push(if rescued.is_empty() { String::new() } else { fmt_f64(mean_std(&rescued).0) });
            csv.push(row)?;
        }
    }
    Ok(csv)
}

/// Writes `rows.csv`, `aggregate.csv` and `manifest.json` into `dir`.
pub fn write_sweep(manifest: &Manifest, result: &SweepResult, dir: &Path) -> Result<()> {
    rows_csv(manifest, result)?.write(&dir.join("rows.csv"))?;
    aggregate_csv(manifest, result)?.write(&dir.join("aggregate.csv"))?;
    io::write_json(&dir.join("manifest.json"), manifest)
}

/// The accuracy-vs-(U1, S) grid with U2 fixed at 0.2: joint training
/// against greedy MCR.
pub fn grid_manifest(seeds: Vec<u64>) -> Manifest {
    let frac = |xs: &[f64]| xs.iter().map(|x| json!(x)).collect::<Vec<_>>();
    Manifest {
        name: "shared-vs-unique-grid".into(),
        base: json!({"data": {"unique_frac_2": 0.2}, "run": {"method": "joint"}}),
        variants: vec![
            Variant {
                label: "joint".into(),
                overrides: BTreeMap::from([("run.method".into(), json!("joint"))]),
            },
            Variant {
                label: "mcr-greedy".into(),
                overrides: BTreeMap::from([
                    ("run.method".into(), json!("mcr")),
                    ("run.mcr.strategy".into(), json!("greedy")),
                ]),
            },
        ],
        grid: vec![
            Axis {
                key: "data.unique_frac_1".into(),
                name: Some("U1".into()),
                values: frac(&[0.1, 0.2, 0.3, 0.4]),
            },
            Axis {
                key: "data.shared_frac".into(),
                name: Some("S".into()),
                values: frac(&[0.1, 0.2, 0.3, 0.4]),
            },
        ],
        seeds,
        error_matrix: true,
    }
}

/// Greedy, independent and collaborative MCR on one competition-heavy cell.
pub fn strategy_manifest(seeds: Vec<u64>) -> Manifest {
    Manifest {
        name: "strategy-ablation".into(),
        base: json!({
            "data": {"unique_frac_1": 0.6, "shared_frac": 0.1, "unique_frac_2": 0.2},
            "run": {"method": "mcr"}
        }),
        variants: ["collaborative", "independent", "greedy"]
            .map(|s| Variant {
                label: s.into(),
                overrides: BTreeMap::from([("run.mcr.strategy".into(), json!(s))]),
            })
            .to_vec(),
        grid: Vec::new(),
        seeds,
        error_matrix: false,
    }
}

/// MCR with the MIPD, contrastive and reconstruction terms toggled.
pub fn component_manifest(seeds: Vec<u64>) -> Manifest {
    let variant = |label: &str, m: f64, con: f64, ceb: f64| Variant {
        label: label.into(),
        overrides: BTreeMap::from([
            ("run.mcr.lambda_M".into(), json!(m)),
            ("run.mcr.lambda_con".into(), json!(con)),
            ("run.mcr.lambda_ceb".into(), json!(ceb)),
        ]),
    };
    Manifest {
        name: "component-ablation".into(),
        base: json!({
            "data": {"unique_frac_1": 0.6, "shared_frac": 0.1, "unique_frac_2": 0.2},
            "run": {"method": "mcr"}
        }),
        variants: vec![
            variant("none", 0.0, 0.0, 0.0),
            variant("mipd", 1.0, 0.0, 0.0),
            variant("con", 0.0, 0.1, 0.0),
            variant("mipd+con", 1.0, 0.1, 0.0),
            variant("mipd+con+ceb", 1.0, 0.1, 0.01),
        ],
        grid: Vec::new(),
        seeds,
        error_matrix: false,
    }
}
