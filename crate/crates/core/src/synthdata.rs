//! Synthetic two-modality data with controlled shared and unique label
//! information, plus exact mutual-information oracles on small discrete
//! joints. All information quantities are in nats.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_classes")]
    pub n_classes: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_train")]
    pub n_train: usize,
    #[serde(default = "default_eval")]
    pub n_val: usize,
    #[serde(default = "default_eval")]
    pub n_test: usize,
    #[serde(default = "default_frac", alias = "S")]
    pub shared_frac: f64,
    #[serde(default = "default_frac", alias = "U1")]
    pub unique_frac_1: f64,
    #[serde(default = "default_frac", alias = "U2")]
    pub unique_frac_2: f64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_classes() -> usize {
    5
}
fn default_dim() -> usize {
    16
}
fn default_train() -> usize {
    2000
}
fn default_eval() -> usize {
    500
}
fn default_frac() -> f64 {
    0.2
}
fn default_noise() -> f64 {
    0.5
}
fn default_amplitude() -> f64 {
    1.0
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: default_classes(),
            dim: default_dim(),
            n_train: default_train(),
            n_val: default_eval(),
            n_test: default_eval(),
            shared_frac: default_frac(),
            unique_frac_1: default_frac(),
            unique_frac_2: default_frac(),
            noise_std: default_noise(),
            amplitude: default_amplitude(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.shared_frac, self.unique_frac_1, self.unique_frac_2];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("fractions must lie in [0, 1]".into()));
        }
        if fr.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "S + U1 + U2 = {} exceeds 1",
                fr.iter().sum::<f64>()
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be at least 2".into()));
        }
        if self.dim < self.n_classes {
            return Err(Error::Config(format!(
                "dim {} is smaller than n_classes {}",
                self.dim, self.n_classes
            )));
        }
        if !(self.noise_std >= 0.0) || !self.amplitude.is_finite() {
            return Err(Error::Config("noise_std must be non-negative and amplitude finite".into()));
        }
        Ok(())
    }
}

/// Which modalities carry the label on a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowKind {
    Shared,
    Unique1,
    Unique2,
    Noise,
}

impl RowKind {
    pub fn informs(self, modality: usize) -> bool {
        matches!(
            (self, modality),
            (RowKind::Shared, _) | (RowKind::Unique1, 0) | (RowKind::Unique2, 1)
        )
    }

    pub fn code(self) -> f64 {
        match self {
            RowKind::Shared => 0.0,
            RowKind::Unique1 => 1.0,
            RowKind::Unique2 => 2.0,
            RowKind::Noise => 3.0,
        }
    }

    pub fn from_code(c: f64) -> Result<Self> {
        match c as i64 {
            0 => Ok(RowKind::Shared),
            1 => Ok(RowKind::Unique1),
            2 => Ok(RowKind::Unique2),
            3 => Ok(RowKind::Noise),
            _ => Err(Error::Format(format!("bad row kind code {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Vec<Tensor>,
    pub y: Vec<usize>,
    pub kinds: Vec<RowKind>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_modalities(&self) -> usize {
        self.x.len()
    }

    /// Rows selected by `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let x = self
            .x
            .iter()
            .map(|t| {
                let d = t.cols();
                let vals = idx.iter().flat_map(|&i| t.row(i).to_vec()).collect();
                Tensor::matrix(idx.len(), d, vals).expect("row selection keeps shape")
            })
            .collect();
        Dataset {
            x,
            y: idx.iter().map(|&i| self.y[i]).collect(),
            kinds: idx.iter().map(|&i| self.kinds[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        for (m, t) in self.x.iter().enumerate() {
            if t.rows() != n {
                return Err(Error::Modality {
                    modality: m,
                    detail: format!("{} rows but {n} labels", t.rows()),
                });
            }
        }
        if let Some(&bad) = self.y.iter().find(|&&l| l >= self.n_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: self.n_classes,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Column-orthonormal square matrix from Gram-Schmidt on Gaussian draws.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for c in &cols {
                let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let mut vals = vec![0.0; n * n];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..n {
            vals[i * n + j] = c[i];
        }
    }
    Tensor::matrix(n, n, vals).expect("square")
}

fn kind_counts(spec: &SyntheticSpec, n: usize) -> [usize; 3] {
    let s = (spec.shared_frac * n as f64).round() as usize;
    let u1 = ((spec.unique_frac_1 * n as f64).round() as usize).min(n - s.min(n));
    let u2 = ((spec.unique_frac_2 * n as f64).round() as usize).min(n.saturating_sub(s + u1));
    [s.min(n), u1, u2]
}

fn generate_split(spec: &SyntheticSpec, n: usize, proj: &[Tensor; 2], rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let [s, u1, u2] = kind_counts(spec, n);
    let mut kinds: Vec<RowKind> = std::iter::repeat_n(RowKind::Shared, s)
        .chain(std::iter::repeat_n(RowKind::Unique1, u1))
        .chain(std::iter::repeat_n(RowKind::Unique2, u2))
        .collect();
    kinds.resize(n, RowKind::Noise);
    kinds.shuffle(rng);
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.n_classes)).collect();
    let normal = Normal::new(0.0, spec.noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let d = spec.dim;
    let mut x = Vec::with_capacity(2);
    for (m, p) in proj.iter().enumerate() {
        let mut vals = vec![0.0; n * d];
        let mut base = vec![0.0; d];
        for i in 0..n {
            for b in base.iter_mut() {
                *b = if spec.noise_std > 0.0 { normal.sample(rng) } else { 0.0 };
            }
            if kinds[i].informs(m) {
                base[y[i]] += spec.amplitude;
            }
            for j in 0..d {
                vals[i * d + j] = (0..d).map(|k| base[k] * p.get(k, j)).sum();
            }
        }
        x.push(Tensor::matrix(n, d, vals)?);
    }
    Ok(Dataset {
        x,
        y,
        kinds,
        n_classes: spec.n_classes,
    })
}

/// Generates disjoint train/val/test splits. The projection matrices depend
/// only on the seed; each split draws from its own stream.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut proj_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    proj_rng.set_stream(1);
    let proj = [
        random_orthogonal(spec.dim, &mut proj_rng),
        random_orthogonal(spec.dim, &mut proj_rng),
    ];
    let split = |stream: u64, n: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream + 2);
        generate_split(spec, n, &proj, &mut rng)
    };
    Ok(SyntheticData {
        spec: spec.clone(),
        train: split(0, spec.n_train)?,
        val: split(1, spec.n_val)?,
        test: split(2, spec.n_test)?,
    })
}

/// Joint table `p[x1][x2][y]` over finite supports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    pub n1: usize,
    pub n2: usize,
    pub ny: usize,
    p: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(n1: usize, n2: usize, ny: usize, p: Vec<f64>) -> Result<Self> {
        if p.len() != n1 * n2 * ny || p.is_empty() {
            return Err(Error::Shape {
                op: "discrete_joint",
                detail: format!("{} entries for {n1}x{n2}x{ny}", p.len()),
            });
        }
        let sum: f64 = p.iter().sum();
        let min = p.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min >= 0.0) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidSimplex { row: 0, sum, min });
        }
        Ok(Self { n1, n2, ny, p })
    }

    /// Random joint with full support, normalized to sum to one.
    pub fn random<R: Rng + ?Sized>(n1: usize, n2: usize, ny: usize, rng: &mut R) -> Self {
        let mut p: Vec<f64> = (0..n1 * n2 * ny).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        let s2: f64 = p.iter().sum();
        p[0] += 1.0 - s2;
        Self { n1, n2, ny, p }
    }

    pub fn p(&self, a: usize, b: usize, y: usize) -> f64 {
        self.p[(a * self.n2 + b) * self.ny + y]
    }

    pub fn table(&self) -> &[f64] {
        &self.p
    }

    fn cells(&self) -> impl Iterator<Item = (usize, usize, usize, f64)> + '_ {
        (0..self.n1).flat_map(move |a| {
            (0..self.n2).flat_map(move |b| (0..self.ny).map(move |y| (a, b, y, self.p(a, b, y))))
        })
    }

    fn marginal(&self, keep: [bool; 3]) -> Vec<f64> {
        let dims = [self.n1, self.n2, self.ny];
        let size = |k: usize| if keep[k] { dims[k] } else { 1 };
        let mut out = vec![0.0; size(0) * size(1) * size(2)];
        for (a, b, y, v) in self.cells() {
            let ia = if keep[0] { a } else { 0 };
            let ib = if keep[1] { b } else { 0 };
            let iy = if keep[2] { y } else { 0 };
            out[(ia * size(1) + ib) * size(2) + iy] += v;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MiQuantity {
    /// `I(X1; Y | X2)`
    UniqueX1,
    /// `I(X2; Y | X1)`
    UniqueX2,
    /// `I(X1; X2)`
    X1X2,
    /// `I(X1; X2 | Y)`
    X1X2GivenY,
    /// `I(X1, X2; Y)`
    Total,
}

impl MiQuantity {
    pub const ALL: [MiQuantity; 5] = [
        MiQuantity::UniqueX1,
        MiQuantity::UniqueX2,
        MiQuantity::X1X2,
        MiQuantity::X1X2GivenY,
        MiQuantity::Total,
    ];
}

impl fmt::Display for MiQuantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MiQuantity::UniqueX1 => "I(X1;Y|X2)",
            MiQuantity::UniqueX2 => "I(X2;Y|X1)",
            MiQuantity::X1X2 => "I(X1;X2)",
            MiQuantity::X1X2GivenY => "I(X1;X2|Y)",
            MiQuantity::Total => "I(X1,X2;Y)",
        })
    }
}

impl FromStr for MiQuantity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|q| q.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown MI quantity `{s}`")))
    }
}

/// Exact value in nats by direct summation over the support.
pub fn mi_oracle(joint: &DiscreteJoint, quantity: MiQuantity) -> f64 {
    let (n2, ny) = (joint.n2, joint.ny);
    let p12 = joint.marginal([true, true, false]);
    let p1y = joint.marginal([true, false, true]);
    let p2y = joint.marginal([false, true, true]);
    let p1 = joint.marginal([true, false, false]);
    let p2 = joint.marginal([false, true, false]);
    let py = joint.marginal([false, false, true]);
    let mut total = 0.0;
    for (a, b, y, p) in joint.cells() {
        if p <= 0.0 {
            continue;
        }
        let ratio = match quantity {
            // p(x1,x2,y) p(x2) / (p(x1,x2) p(x2,y))
            MiQuantity::UniqueX1 => p * p2[b] / (p12[a * n2 + b] * p2y[b * ny + y]),
            MiQuantity::UniqueX2 => p * p1[a] / (p12[a * n2 + b] * p1y[a * ny + y]),
            MiQuantity::X1X2 => p12[a * n2 + b] / (p1[a] * p2[b]),
            MiQuantity::X1X2GivenY => p * py[y] / (p1y[a * ny + y] * p2y[b * ny + y]),
            MiQuantity::Total => p / (p12[a * n2 + b] * py[y]),
        };
        total += p * ratio.ln();
    }
    total
}

pub const DEFAULT_ENUMERATION_CAP: u128 = 2_000_000;

/// Log of the optimal critic `p(x2 | x1, y) / p(x2)`; `-inf` off the support.
fn log_critic(joint: &DiscreteJoint, p2: &[f64], p1y: &[f64], a: usize, y: usize, b: usize) -> f64 {
    let num = joint.p(a, b, y) / p1y[a * joint.ny + y];
    if num <= 0.0 || p2[b] <= 0.0 {
        f64::NEG_INFINITY
    } else {
        (num / p2[b]).ln()
    }
}

fn batch_loss(joint: &DiscreteJoint, p2: &[f64], p1y: &[f64], batch: &[(usize, usize, usize)]) -> f64 {
    let n = batch.len();
    let mut total = 0.0;
    let mut scores = vec![0.0; n];
    for (i, &(a, _, y)) in batch.iter().enumerate() {
        for (j, &(_, b, _)) in batch.iter().enumerate() {
            scores[j] = log_critic(joint, p2, p1y, a, y, b);
        }
        total += log_sum_exp(&scores) - scores[i];
    }
    total / n as f64
}

/// Expected contrastive loss of `(x1, y)` anchors retrieving their paired
/// `x2` among `n` i.i.d. draws, under the optimal critic. Exact by
/// enumerating every batch of support cells; fails above `cap` outcomes.
pub fn optimal_critic_contrastive(joint: &DiscreteJoint, n: usize, cap: u128) -> Result<f64> {
    if n < 2 {
        return Err(Error::Contrastive(format!("batch size {n} is below 2")));
    }
    let support: Vec<(usize, usize, usize, f64)> = joint.cells().filter(|c| c.3 > 0.0).collect();
    let outcomes = (support.len() as u128).checked_pow(n as u32).unwrap_or(u128::MAX);
    if outcomes > cap {
        return Err(Error::SupportTooLarge { outcomes, cap });
    }
    let p2 = joint.marginal([false, true, false]);
    let p1y = joint.marginal([true, false, true]);
    let mut idx = vec![0usize; n];
    let mut batch = vec![(0, 0, 0); n];
    let mut expected = 0.0;
    loop {
        let mut prob = 1.0;
        for (slot, &k) in idx.iter().enumerate() {
            let (a, b, y, p) = support[k];
            batch[slot] = (a, b, y);
            prob *= p;
        }
        expected += prob * batch_loss(joint, &p2, &p1y, &batch);
        let mut pos = 0;
        loop {
            if pos == n {
                return Ok(expected);
            }
            idx[pos] += 1;
            if idx[pos] < support.len() {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

/// Monte Carlo estimate of [`optimal_critic_contrastive`] with its standard
/// error.
pub fn optimal_critic_contrastive_mc(joint: &DiscreteJoint, n: usize, draws: usize, seed: u64) -> Result<(f64, f64)> {
    if n < 2 || draws < 2 {
        return Err(Error::Contrastive("need batch size and draws of at least 2".into()));
    }
    let cells: Vec<(usize, usize, usize, f64)> = joint.cells().collect();
    let mut cdf = Vec::with_capacity(cells.len());
    let mut acc = 0.0;
    for c in &cells {
        acc += c.3;
        cdf.push(acc);
    }
    let p2 = joint.marginal([false, true, false]);
    let p1y = joint.marginal([true, false, true]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = vec![(0, 0, 0); n];
    let mut vals = Vec::with_capacity(draws);
    for _ in 0..draws {
        for slot in batch.iter_mut() {
            let u: f64 = rng.random::<f64>() * acc;
            let k = cdf.partition_point(|&c| c <= u).min(cells.len() - 1);
            *slot = (cells[k].0, cells[k].1, cells[k].2);
        }
        vals.push(batch_loss(joint, &p2, &p1y, &batch));
    }
    let mean = vals.iter().sum::<f64>() / draws as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
    if var == 0.0 {
        warn!("optimal critic Monte Carlo: zero variance across {draws} draws");
    }
    Ok((mean, (var / draws as f64).sqrt()))
}

/// Right-hand side of the contrastive bound:
/// `I(X2;Y|X1) + I(X1;Y|X2) + 2 I(X1;X2)`.
pub fn contrastive_bound_rhs(joint: &DiscreteJoint) -> f64 {
    mi_oracle(joint, MiQuantity::UniqueX2) + mi_oracle(joint, MiQuantity::UniqueX1) + 2.0 * mi_oracle(joint, MiQuantity::X1X2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_train: 300,
            n_val: 50,
            n_test: 50,
            dim: 8,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        assert_eq!(a, b);
        let mut other = small_spec();
        other.seed = 10;
        assert_ne!(generate(&other).unwrap().train.x[0], a.train.x[0]);
    }

    #[test]
    fn rejects_bad_fractions() {
        let mut s = small_spec();
        s.shared_frac = 0.7;
        s.unique_frac_1 = 0.5;
        assert!(generate(&s).is_err());
        s.shared_frac = -0.1;
        assert!(generate(&s).is_err());
        let mut s = small_spec();
        s.dim = 3;
        assert!(generate(&s).is_err());
    }

    #[test]
    fn kind_counts_exact() {
        let d = generate(&small_spec()).unwrap().train;
        let count = |k| d.kinds.iter().filter(|&&v| v == k).count();
        assert_eq!(count(RowKind::Shared), 60);
        assert_eq!(count(RowKind::Unique1), 60);
        assert_eq!(count(RowKind::Unique2), 60);
        assert_eq!(count(RowKind::Noise), 120);
    }

    #[test]
    fn orthogonal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_orthogonal(6, &mut rng);
        for i in 0..6 {
            for j in 0..6 {
                let d: f64 = (0..6).map(|k| q.get(k, i) * q.get(k, j)).sum();
                assert!((d - f64::from(u8::from(i == j))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noiseless_rows_recover_label() {
        let mut s = small_spec();
        s.noise_std = 0.0;
        s.shared_frac = 1.0;
        s.unique_frac_1 = 0.0;
        s.unique_frac_2 = 0.0;
        let d = generate(&s).unwrap().train;
        // the rows are rotations of amplitude * e_y, so distinct labels give distinct rows
        for m in 0..2 {
            for i in 0..d.len() {
                for j in 0..d.len() {
                    let same = d.x[m].row(i) == d.x[m].row(j);
                    assert_eq!(same, d.y[i] == d.y[j]);
                }
            }
        }
    }

    #[test]
    fn class_balance_within_three_sigma() {
        let mut s = small_spec();
        s.n_train = 5000;
        let d = generate(&s).unwrap().train;
        let p: f64 = 1.0 / 5.0;
        let sd = (5000.0 * p * (1.0 - p)).sqrt();
        for c in 0..5 {
            let k = d.y.iter().filter(|&&v| v == c).count() as f64;
            assert!((k - 5000.0 * p).abs() < 3.0 * sd);
        }
    }

    fn redundant() -> DiscreteJoint {
        let mut p = vec![0.0; 8];
        p[0] = 0.5;
        p[7] = 0.5;
        DiscreteJoint::new(2, 2, 2, p).unwrap()
    }

    #[test]
    fn redundancy_oracle() {
        let j = redundant();
        assert!((mi_oracle(&j, MiQuantity::Total) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(mi_oracle(&j, MiQuantity::UniqueX1), 0.0);
        assert_eq!(mi_oracle(&j, MiQuantity::UniqueX2), 0.0);
    }

    #[test]
    fn independent_modalities() {
        let pa = [0.3, 0.7];
        let pb = [0.6, 0.1, 0.3];
        let mut p = Vec::new();
        for a in pa {
            for b in pb {
                p.push(a * b * 0.5);
                p.push(a * b * 0.5);
            }
        }
        let j = DiscreteJoint::new(2, 3, 2, p).unwrap();
        assert!(mi_oracle(&j, MiQuantity::X1X2).abs() < 1e-15);
    }

    #[test]
    fn decomposition_identity_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let j = DiscreteJoint::random(2, 2, 2, &mut rng);
            let v: Vec<f64> = MiQuantity::ALL.iter().map(|q| mi_oracle(&j, *q)).collect();
            assert!((v[4] - (v[0] + v[1] + v[2] - v[3])).abs() < 1e-12);
            assert!(v.iter().all(|x| *x > -1e-15));
        }
    }

    #[test]
    fn critic_independent_is_log_n() {
        let mut p = Vec::new();
        for a in [0.4, 0.6] {
            for b in [0.5, 0.2, 0.3] {
                for y in [0.1, 0.9] {
                    p.push(a * b * y);
                }
            }
        }
        let j = DiscreteJoint::new(2, 3, 2, p).unwrap();
        for n in [2, 3] {
            let l = optimal_critic_contrastive(&j, n, DEFAULT_ENUMERATION_CAP).unwrap();
            assert!((l - (n as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn critic_injective_is_collision_entropy() {
        // x2 = 2*x1 + y over uniform (x1, y): batch of 2 collides with probability 1/4
        let mut p = vec![0.0; 2 * 4 * 2];
        for a in 0..2 {
            for y in 0..2 {
                p[(a * 4 + 2 * a + y) * 2 + y] = 0.25;
            }
        }
        let j = DiscreteJoint::new(2, 4, 2, p).unwrap();
        let l = optimal_critic_contrastive(&j, 2, DEFAULT_ENUMERATION_CAP).unwrap();
        assert!((l - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn critic_bound_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let j = DiscreteJoint::random(2, 2, 2, &mut rng);
            for n in [2, 3] {
                let l = optimal_critic_contrastive(&j, n, DEFAULT_ENUMERATION_CAP).unwrap();
                assert!((n as f64).ln() - l <= contrastive_bound_rhs(&j) + 1e-12);
            }
        }
    }

    #[test]
    fn critic_cap_and_mc() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let j = DiscreteJoint::random(3, 3, 3, &mut rng);
        assert!(matches!(
            optimal_critic_contrastive(&j, 8, 1000),
            Err(Error::SupportTooLarge { .. })
        ));
        let exact = optimal_critic_contrastive(&j, 2, DEFAULT_ENUMERATION_CAP).unwrap();
        let (mc, se) = optimal_critic_contrastive_mc(&j, 2, 20_000, 5).unwrap();
        assert!((mc - exact).abs() < 4.0 * se + 1e-9, "{mc} vs {exact} (se {se})");
    }

    #[test]
    fn quantity_names_round_trip() {
        for q in MiQuantity::ALL {
            assert_eq!(q.to_string().parse::<MiQuantity>().unwrap(), q);
        }
    }
}
