//! Prediction, per-epoch diagnostics, linear probes, error matrices and the
//! empirical risk gap.

use log::warn;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::game::importance_scores;
use crate::losses::{ceb_loss, cross_entropy, LossReport, McrConfig};
use crate::models::MultimodalModel;
use crate::perturb::{label_match_split, sample_permutations, CostCounter};
use crate::synthdata::Dataset;

use super::{pairwise_contrastive, EpochRecord, Objective, RunConfig, Splits};

/// Full-batch gradient steps of the linear probe.
pub const PROBE_STEPS: usize = 200;
pub const PROBE_LR: f64 = 0.1;

/// Which output of the model makes the prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Predictor {
    Fused,
    Unimodal(usize),
    /// Mean of the unimodal heads' softmax outputs.
    Ensemble,
}

fn softmax_rows(t: &[f64], c: usize) -> Vec<Vec<f64>> {
    t.chunks(c)
        .map(|r| {
            let mut r = r.to_vec();
            softmax_in_place(&mut r);
            r
        })
        .collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Class probabilities for every row of `data`.
pub fn predict_probs(model: &MultimodalModel, predictor: Predictor, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let c = model.n_classes();
    let mut g = Graph::new();
    let mut counter = CostCounter::new(model.n_modalities());
    match predictor {
        Predictor::Fused => {
            let inputs: Vec<&Tensor> = data.x.iter().collect();
            let out = model.forward(&mut g, &inputs, &mut counter)?;
            Ok(softmax_rows(g.value(out.fused), c))
        }
        Predictor::Unimodal(m) => {
            let x = data.x.get(m).ok_or_else(|| Error::Modality {
                modality: m,
                detail: "dataset has no such modality".into(),
            })?;
            let l = model.unimodal_model_forward(&mut g, m, x, &mut counter)?;
            Ok(softmax_rows(g.value(l), c))
        }
        Predictor::Ensemble => {
            let per: Vec<Vec<Vec<f64>>> = (0..model.n_modalities())
                .map(|m| predict_probs(model, Predictor::Unimodal(m), data))
                .collect::<Result<_>>()?;
            mean_probs(&per)
        }
    }
}

fn mean_probs(per_model: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    let first = per_model
        .first()
        .ok_or_else(|| Error::Config("ensemble needs at least one model".into()))?;
    let n = first.len();
    let c = first.first().map_or(0, Vec::len);
    if per_model.iter().any(|p| p.len() != n || p.iter().any(|r| r.len() != c)) {
        return Err(Error::Shape {
            op: "ensemble",
            detail: "member predictions differ in shape".into(),
        });
    }
    let k = per_model.len() as f64;
    Ok((0..n)
        .map(|i| (0..c).map(|j| per_model.iter().map(|p| p[i][j]).sum::<f64>() / k).collect())
        .collect())
}

/// Argmax of the mean of per-model probabilities.
pub fn ensemble_from_probs(per_model: &[Vec<Vec<f64>>]) -> Result<Vec<usize>> {
    Ok(mean_probs(per_model)?.iter().map(|r| argmax_lowest(r)).collect())
}

/// Ensemble of the model's unimodal paths.
pub fn ensemble_predict(model: &MultimodalModel, data: &Dataset) -> Result<Vec<usize>> {
    predict(model, Predictor::Ensemble, data)
}

pub fn predict(model: &MultimodalModel, predictor: Predictor, data: &Dataset) -> Result<Vec<usize>> {
    Ok(predict_probs(model, predictor, data)?
        .iter()
        .map(|r| argmax_lowest(r))
        .collect())
}

pub fn accuracy(pred: &[usize], y: &[usize]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
}

pub fn unimodal_predictions(model: &MultimodalModel, data: &Dataset) -> Result<Vec<Vec<usize>>> {
    (0..model.n_modalities())
        .map(|m| predict(model, Predictor::Unimodal(m), data))
        .collect()
}

/// Encoder outputs for every modality.
pub fn latents(model: &MultimodalModel, data: &Dataset) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let mut counter = CostCounter::new(model.n_modalities());
    (0..model.n_modalities())
        .map(|m| {
            let z = model.encode(&mut g, m, &data.x[m], &mut counter)?;
            Ok(g.to_tensor(z))
        })
        .collect()
}

/// Multinomial logistic regression on frozen features: zero init,
/// [`PROBE_STEPS`] full-batch gradient steps at [`PROBE_LR`], no feature
/// scaling. Returns test accuracy.
pub fn linear_probe(
    train_z: &Tensor,
    train_y: &[usize],
    test_z: &Tensor,
    test_y: &[usize],
    n_classes: usize,
) -> Result<f64> {
    let (n, d) = (train_z.rows(), train_z.cols());
    if train_y.len() != n || test_y.len() != test_z.rows() || test_z.cols() != d {
        return Err(Error::Shape {
            op: "linear_probe",
            detail: "features and labels disagree".into(),
        });
    }
    if let Some(&bad) = train_y.iter().chain(test_y).find(|&&l| l >= n_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: n_classes,
        });
    }
    let degenerate = (0..d).all(|j| {
        let first = train_z.get(0, j);
        (0..n).all(|i| train_z.get(i, j) == first)
    });
    if n == 0 || degenerate {
        warn!("linear probe: latents have zero variance, reporting chance accuracy");
        return Ok(1.0 / n_classes as f64);
    }
    let c = n_classes;
    let mut w = vec![0.0; d * c];
    let mut b = vec![0.0; c];
    let mut gw = vec![0.0; d * c];
    let mut gb = vec![0.0; c];
    let mut p = vec![0.0; c];
    let inv_n = 1.0 / n as f64;
    let logits = |x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]| {
        out.copy_from_slice(b);
        for (k, xk) in x.iter().enumerate() {
            if *xk != 0.0 {
                for (o, wk) in out.iter_mut().zip(&w[k * c..(k + 1) * c]) {
                    *o += xk * wk;
                }
            }
        }
    };
    for _ in 0..PROBE_STEPS {
        gw.fill(0.0);
        gb.fill(0.0);
        for i in 0..n {
            let x = train_z.row(i);
            logits(x, &w, &b, &mut p);
            softmax_in_place(&mut p);
            p[train_y[i]] -= 1.0;
            for (k, xk) in x.iter().enumerate() {
                if *xk != 0.0 {
                    for (gk, pj) in gw[k * c..(k + 1) * c].iter_mut().zip(&p) {
                        *gk += xk * pj;
                    }
                }
            }
            gb.iter_mut().zip(&p).for_each(|(g, v)| *g += v);
        }
        w.iter_mut().zip(&gw).for_each(|(w, g)| *w -= PROBE_LR * g * inv_n);
        b.iter_mut().zip(&gb).for_each(|(b, g)| *b -= PROBE_LR * g * inv_n);
    }
    let mut correct = 0;
    for (i, &t) in test_y.iter().enumerate() {
        logits(test_z.row(i), &w, &b, &mut p);
        if argmax_lowest(&p) == t {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_y.len().max(1) as f64)
}

/// Joint counts of unimodal and multimodal correctness.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorMatrix {
    /// `correct[k]`: multimodal correct and exactly `k` unimodal models correct.
    pub correct: Vec<usize>,
    /// `incorrect[k]`: multimodal wrong and exactly `k` unimodal models correct.
    pub incorrect: Vec<usize>,
}

impl ErrorMatrix {
    pub fn total(&self) -> usize {
        self.correct.iter().chain(&self.incorrect).sum()
    }

    /// Multimodal correct while at least one unimodal model is correct.
    pub fn rescued(&self) -> usize {
        self.correct.iter().skip(1).sum()
    }
}

pub fn error_matrix(unimodal: &[Vec<usize>], multimodal: &[usize], y: &[usize]) -> Result<ErrorMatrix> {
    let n = y.len();
    if multimodal.len() != n || unimodal.iter().any(|u| u.len() != n) {
        return Err(Error::Shape {
            op: "error_matrix",
            detail: "prediction vectors differ in length".into(),
        });
    }
    let m = unimodal.len();
    let mut out = ErrorMatrix {
        correct: vec![0; m + 1],
        incorrect: vec![0; m + 1],
    };
    for i in 0..n {
        let k = unimodal.iter().filter(|u| u[i] == y[i]).count();
        if multimodal[i] == y[i] {
            out.correct[k] += 1;
        } else {
            out.incorrect[k] += 1;
        }
    }
    Ok(out)
}

fn mean_nll(probs: &[Vec<f64>], y: &[usize]) -> f64 {
    probs
        .iter()
        .zip(y)
        .map(|(p, &t)| -p[t].max(crate::autodiff::LOG_EPS).ln())
        .sum::<f64>()
        / y.len().max(1) as f64
}

/// Test minus train mean task loss of the predictor.
pub fn mce_estimate(model: &MultimodalModel, predictor: Predictor, train: &Dataset, test: &Dataset) -> Result<f64> {
    let tr = mean_nll(&predict_probs(model, predictor, train)?, &train.y);
    let te = mean_nll(&predict_probs(model, predictor, test)?, &test.y);
    Ok(te - tr)
}

fn row_jsd(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for (a, b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if *a > 0.0 {
            s += 0.5 * a * (a / m).ln();
        }
        if *b > 0.0 {
            s += 0.5 * b * (b / m).ln();
        }
    }
    s
}

/// Validation loss terms for the weights of the objective being trained.
fn val_report(
    g: &mut Graph,
    model: &MultimodalModel,
    latents: &[Var],
    fused: Var,
    unimodal: &[Var],
    y: &[usize],
    mcr: &McrConfig,
    mipd: &[f64],
) -> Result<LossReport> {
    let task = cross_entropy(g, fused, y)?;
    let mut r = LossReport {
        task: g.scalar(task),
        mipd: mipd.iter().map(|v| -v).collect(),
        ..Default::default()
    };
    for u in unimodal {
        let l = cross_entropy(g, *u, y)?;
        r.uni.push(g.scalar(l));
    }
    if y.len() >= 2 {
        if let Some(l) = pairwise_contrastive(g, latents, y, mcr.contrastive_temperature)? {
            r.con = g.scalar(l);
        }
    }
    let l = ceb_loss(g, model, latents, fused)?;
    r.ceb = g.scalar(l);
    r.total = r.weighted_total(mcr);
    Ok(r)
}

/// Metrics after one epoch: accuracies, validation losses, importance,
/// label-matched JSD means and optional linear probes.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_epoch(
    model: &MultimodalModel,
    predictor: Predictor,
    objective: &Objective,
    config: &RunConfig,
    data: Splits<'_>,
    epoch: usize,
    train: LossReport,
    rng: &mut ChaCha8Rng,
) -> Result<EpochRecord> {
    let val_accuracy = accuracy(&predict(model, predictor, data.val)?, &data.val.y);
    let test_accuracy = if data.test.is_empty() {
        0.0
    } else {
        accuracy(&predict(model, predictor, data.test)?, &data.test.y)
    };

    let mcr = match objective {
        Objective::Fused { mcr, .. } => mcr.clone(),
        _ => McrConfig {
            lambda_uni: 1.0,
            ..McrConfig::disabled()
        },
    };
    let mut g = Graph::new();
    let mut counter = CostCounter::new(model.n_modalities());
    let inputs: Vec<&Tensor> = data.val.x.iter().collect();
    let out = model.forward(&mut g, &inputs, &mut counter)?;
    let y = &data.val.y;
    let (importance, jsd_matching, jsd_nonmatching) = if y.len() >= 2 {
        let sigmas = sample_permutations(y.len(), config.mcr.n_perm(), rng)?;
        let importance = importance_scores(&mut g, model, &out.latents, out.fused, &sigmas, &mut counter)?;
        let c = model.n_classes();
        let clean = softmax_rows(g.value(out.fused), c);
        let (mut sm, mut nm, mut sn, mut nn) = (0.0, 0usize, 0.0, 0usize);
        for m in 0..model.n_modalities() {
            for s in &sigmas {
                let z = g.permute_rows(out.latents[m], s)?;
                let mut zs = out.latents.clone();
                zs[m] = z;
                let l = model.fused_forward_from_latents(&mut g, &zs, &mut counter)?;
                let pert = softmax_rows(g.value(l), c);
                let split = label_match_split(s, y);
                for i in split.matching {
                    sm += row_jsd(&clean[i], &pert[i]);
                    nm += 1;
                }
                for i in split.nonmatching {
                    sn += row_jsd(&clean[i], &pert[i]);
                    nn += 1;
                }
            }
        }
        let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        (importance, mean(sm, nm), mean(sn, nn))
    } else {
        (vec![0.0; model.n_modalities()], None, None)
    };
    let val = val_report(&mut g, model, &out.latents, out.fused, &out.unimodal, y, &mcr, &importance)?;

    let probe_accuracy = if config.probe && !data.test.is_empty() {
        let ztr = latents(model, data.train)?;
        let zte = latents(model, data.test)?;
        (0..model.n_modalities())
            .map(|m| linear_probe(&ztr[m], &data.train.y, &zte[m], &data.test.y, model.n_classes()))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    Ok(EpochRecord {
        epoch,
        phase: objective.name().to_string(),
        train,
        val,
        val_accuracy,
        test_accuracy,
        importance_sum: importance.iter().sum(),
        importance,
        probe_accuracy,
        jsd_matching,
        jsd_nonmatching,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax_lowest(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax_lowest(&[0.5, 0.5]), 0);
    }

    #[test]
    fn ensemble_identical_members() {
        let p = vec![vec![0.1, 0.7, 0.2], vec![0.6, 0.3, 0.1]];
        assert_eq!(ensemble_from_probs(&[p.clone(), p.clone()]).unwrap(), vec![1, 0]);
    }

    #[test]
    fn ensemble_opposite_confidence_ties_low() {
        let a = vec![vec![0.9, 0.1, 0.0]];
        let b = vec![vec![0.1, 0.9, 0.0]];
        assert_eq!(ensemble_from_probs(&[b, a]).unwrap(), vec![0]);
    }

    #[test]
    fn ensemble_shape_mismatch() {
        let a = vec![vec![0.5, 0.5]];
        let b = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        assert!(ensemble_from_probs(&[a, b]).is_err());
    }

    #[test]
    fn ensemble_seeded_pair_golden() {
        use crate::models::ModelSpec;
        use crate::synthdata::{generate, SyntheticSpec};
        let d = generate(&SyntheticSpec {
            n_train: 8,
            n_val: 4,
            n_test: 12,
            dim: 6,
            n_classes: 3,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let model = MultimodalModel::new(ModelSpec::toy(&[6, 6], 3), 21).unwrap();
        let pred = ensemble_predict(&model, &d.test).unwrap();
        assert_eq!(pred, GOLDEN_ENSEMBLE.to_vec(), "{pred:?}");
    }

    const GOLDEN_ENSEMBLE: [usize; 12] = [1, 2, 2, 2, 1, 2, 1, 2, 2, 2, 1, 2];

    #[test]
    fn probe_one_hot_is_perfect() {
        let y: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let z = Tensor::matrix(40, 4, y.iter().flat_map(|&c| (0..4).map(move |k| f64::from(u8::from(k == c)))).collect())
            .unwrap();
        assert_eq!(linear_probe(&z, &y, &z, &y, 4).unwrap(), 1.0);
    }

    #[test]
    fn probe_noise_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 2000;
        let ztr = Tensor::matrix(n, 8, (0..n * 8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let zte = Tensor::matrix(n, 8, (0..n * 8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let ytr: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
        let yte: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
        let acc = linear_probe(&ztr, &ytr, &zte, &yte, 5).unwrap();
        assert!((acc - 0.2).abs() < 0.04, "{acc}");
    }

    #[test]
    fn probe_constant_latents_is_chance() {
        let z = Tensor::matrix(6, 2, vec![1.0; 12]).unwrap();
        let y = vec![0, 1, 2, 3, 4, 0];
        assert_eq!(linear_probe(&z, &y, &z, &y, 5).unwrap(), 0.2);
    }

    #[test]
    fn error_matrix_cases() {
        let y = vec![0, 1, 2, 0, 1];
        let u1 = vec![0, 1, 0, 0, 0];
        let u2 = vec![1, 1, 2, 2, 0];
        let e = error_matrix(&[u1.clone(), u2.clone()], &u1, &y).unwrap();
        assert_eq!(e.total(), 5);
        // copy of unimodal-1: every sample it gets right is multimodal-correct
        for i in 0..5 {
            if u1[i] == y[i] {
                assert_eq!(u1[i], y[i]);
            }
        }
        assert_eq!(e.correct, vec![0, 2, 1]);
        assert_eq!(e.incorrect, vec![1, 1, 0]);
        let perfect = error_matrix(&[y.clone(), y.clone()], &y, &y).unwrap();
        assert_eq!(perfect.correct, vec![0, 0, 5]);
        assert_eq!(perfect.incorrect, vec![0, 0, 0]);
        assert!(error_matrix(&[y.clone()], &y[..3], &y).is_err());
    }

    #[test]
    fn mce_same_split_is_zero() {
        use crate::models::ModelSpec;
        use crate::synthdata::{generate, SyntheticSpec};
        let d = generate(&SyntheticSpec {
            n_train: 20,
            n_val: 4,
            n_test: 4,
            dim: 5,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let model = MultimodalModel::new(ModelSpec::toy(&[5, 5], 5), 1).unwrap();
        assert_eq!(mce_estimate(&model, Predictor::Fused, &d.train, &d.train).unwrap(), 0.0);
    }

    #[test]
    fn row_jsd_matches_graph_jsd() {
        let p = [0.2, 0.5, 0.3];
        let q = [0.6, 0.1, 0.3];
        let mut g = Graph::new();
        let a = g.constant(1, 3, p.to_vec()).unwrap();
        let b = g.constant(1, 3, q.to_vec()).unwrap();
        let j = crate::losses::jsd(&mut g, a, b).unwrap();
        assert!((g.scalar(j) - row_jsd(&p, &q)).abs() < 1e-15);
    }
}
