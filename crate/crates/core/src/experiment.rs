//! One run end to end: data, training, summary and artifacts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, fmt_f64, fmt_opt, Csv};
use crate::perturb::CostCounter;
use crate::synthdata::{generate, SyntheticData, SyntheticSpec};
use crate::trainer::{
    accuracy, error_matrix, mce_estimate, predict, train, EpochRecord, ErrorMatrix, Method, RunConfig, Splits,
    TrainOutput,
};

/// Data and run configuration hashed together into artifact headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    #[serde(default)]
    pub data: SyntheticSpec,
    pub run: RunConfig,
}

impl Experiment {
    pub fn config_hash(&self) -> Result<String> {
        io::config_hash(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.run.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    pub method: Method,
    pub test_accuracy: f64,
    pub best_val_accuracy: f64,
    pub best_epochs: Vec<usize>,
    pub epochs_run: usize,
    pub mce: f64,
    pub error_matrix: Option<ErrorMatrix>,
    pub cost: CostCounter,
    pub steps: usize,
    /// Per epoch, per modality.
    pub importance: Vec<Vec<f64>>,
    pub importance_sum: Vec<f64>,
    pub probe_accuracy: Vec<Vec<f64>>,
}

pub fn splits(data: &SyntheticData) -> Splits<'_> {
    Splits {
        train: &data.train,
        val: &data.val,
        test: &data.test,
    }
}

/// Test predictions of one unimodal model per modality, trained with the
/// run's optimizer and model settings.
pub fn unimodal_reference(run: &RunConfig, data: &SyntheticData) -> Result<Vec<Vec<usize>>> {
    (0..data.train.x.len())
        .map(|m| {
            let mut cfg = run.clone();
            cfg.method = Method::Unimodal(m);
            cfg.probe = false;
            let out = train(&cfg, splits(data))?;
            predict(&out.model, cfg.predictor(), &data.test)
        })
        .collect()
}

pub fn summarize(
    exp: &Experiment,
    data: &SyntheticData,
    out: &TrainOutput,
    reference: Option<&[Vec<usize>]>,
) -> Result<RunSummary> {
    let predictor = exp.run.predictor();
    let pred = predict(&out.model, predictor, &data.test)?;
    let em = reference
        .map(|uni| error_matrix(uni, &pred, &data.test.y))
        .transpose()?;
    let best_val = out
        .records
        .iter()
        .map(|r| r.val_accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(RunSummary {
        config_hash: exp.config_hash()?,
        seed: exp.run.seed,
        method: exp.run.method,
        test_accuracy: accuracy(&pred, &data.test.y),
        best_val_accuracy: best_val,
        best_epochs: out.best_epochs.clone(),
        epochs_run: out.records.len(),
        mce: mce_estimate(&out.model, predictor, &data.train, &data.test)?,
        error_matrix: em,
        cost: out.cost.clone(),
        steps: out.steps,
        importance: out.records.iter().map(|r| r.importance.clone()).collect(),
        importance_sum: out.records.iter().map(|r| r.importance_sum).collect(),
        probe_accuracy: out.records.iter().map(|r| r.probe_accuracy.clone()).collect(),
    })
}

pub fn epoch_header(m: usize) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "phase"].map(String::from).to_vec();
    for split in ["train", "val"] {
        for part in ["task", "uni_sum", "mipd_sum", "con", "ceb", "total"] {
            h.push(format!("{split}_{part}"));
        }
    }
    h.extend(["val_accuracy", "test_accuracy"].map(String::from));
    h.extend((1..=m).map(|i| format!("importance_{i}")));
    h.push("importance_sum".into());
    h.extend((1..=m).map(|i| format!("probe_{i}")));
    h.extend(["jsd_matching", "jsd_nonmatching"].map(String::from));
    h
}

/// One row per epoch; probe columns are empty when probing is off.
pub fn epoch_csv(records: &[EpochRecord], n_modalities: usize, config_hash: &str, seed: u64) -> Result<Csv> {
    let header = epoch_header(n_modalities);
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = Csv::new(config_hash, seed, &refs);
    for r in records {
        let mut row = vec![r.epoch.to_string(), r.phase.clone()];
        for l in [&r.train, &r.val] {
            row.extend([l.task, l.uni.iter().sum(), l.mipd.iter().sum(), l.con, l.ceb, l.total].map(fmt_f64));
        }
        row.push(fmt_f64(r.val_accuracy));
        row.push(fmt_f64(r.test_accuracy));
        row.extend((0..n_modalities).map(|i| fmt_opt(r.importance.get(i).copied())));
        row.push(fmt_f64(r.importance_sum));
        row.extend((0..n_modalities).map(|i| fmt_opt(r.probe_accuracy.get(i).copied())));
        row.push(fmt_opt(r.jsd_matching));
        row.push(fmt_opt(r.jsd_nonmatching));
        csv.push(row)?;
    }
    Ok(csv)
}

pub struct RunArtifacts {
    pub output: TrainOutput,
    pub summary: RunSummary,
    pub csv: Csv,
}

/// Trains on `data` (generated from `exp.data` when absent).
pub fn run(exp: &Experiment, data: Option<&SyntheticData>, with_error_matrix: bool) -> Result<RunArtifacts> {
    exp.validate()?;
    let generated;
    let data = match data {
        Some(d) => d,
        None => {
            generated = generate(&exp.data)?;
            &generated
        }
    };
    if data.spec != exp.data {
        return Err(Error::Config("dataset spec differs from the experiment's data section".into()));
    }
    let output = train(&exp.run, splits(data))?;
    let reference = if with_error_matrix {
        Some(unimodal_reference(&exp.run, data)?)
    } else {
        None
    };
    let summary = summarize(exp, data, &output, reference.as_deref())?;
    let csv = epoch_csv(&output.records, data.train.x.len(), &summary.config_hash, exp.run.seed)?;
    Ok(RunArtifacts { output, summary, csv })
}

/// Writes `epochs.csv`, `summary.json`, `checkpoint.bin` and `config.json`.
pub fn write_artifacts(exp: &Experiment, art: &RunArtifacts, dir: &Path) -> Result<()> {
    art.csv.write(&dir.join("epochs.csv"))?;
    io::write_json(&dir.join("summary.json"), &art.summary)?;
    io::write_json(&dir.join("config.json"), exp)?;
    io::checkpoint(&art.output.model, &art.summary.config_hash, exp.run.seed).write(&dir.join("checkpoint.bin"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Activation;
    use crate::trainer::ModelConfig;

    pub(crate) fn tiny(method: Method) -> Experiment {
        let mut run = RunConfig::new(method);
        run.model = ModelConfig {
            encoder_hidden: vec![8],
            latent_dim: 4,
            fusion_hidden: vec![8],
            recon_hidden: vec![4],
            activation: Activation::Relu,
        };
        run.optimizer.epochs = 2;
        run.optimizer.batch_size = 16;
        Experiment {
            data: SyntheticSpec {
                n_train: 48,
                n_val: 16,
                n_test: 20,
                dim: 5,
                n_classes: 3,
                seed: 2,
                ..Default::default()
            },
            run,
        }
    }

    #[test]
    fn joint_smoke_run_writes_one_row_per_epoch() {
        let exp = tiny(Method::Joint);
        let art = run(&exp, None, true).unwrap();
        assert_eq!(art.csv.rows.len(), 2);
        assert_eq!(art.csv.header.len(), epoch_header(2).len());
        let em = art.summary.error_matrix.unwrap();
        assert_eq!(em.total(), 20);
        assert!(art.csv.render().starts_with(&format!("# config_hash={} seed=0\n", art.summary.config_hash)));
    }

    #[test]
    fn mcr_summary_has_importance_series() {
        let exp = tiny(Method::Mcr);
        let art = run(&exp, None, false).unwrap();
        assert_eq!(art.summary.importance.len(), art.summary.epochs_run);
        assert!(art.summary.importance.iter().all(|v| v.len() == 2));
        let json = serde_json::to_value(&art.summary).unwrap();
        assert!(json["importance"].is_array());
    }

    #[test]
    fn rerun_is_bit_identical() {
        let exp = tiny(Method::Mcr);
        let a = run(&exp, None, false).unwrap();
        let b = run(&exp, None, false).unwrap();
        assert_eq!(a.csv.render(), b.csv.render());
        assert_eq!(a.summary, b.summary);
    }

    #[test]
    fn mismatched_dataset_is_rejected() {
        let exp = tiny(Method::Joint);
        let mut other = exp.data.clone();
        other.seed += 1;
        let d = generate(&other).unwrap();
        assert!(run(&exp, Some(&d), false).is_err());
    }
}
