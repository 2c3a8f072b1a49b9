//! Loss terms of the regularized objective and the configuration that weighs
//! them.
//!
//! All functions build nodes on a caller-owned [`Graph`] and return the scalar
//! node, so every term is differentiable and can be backpropagated on its own.

pub mod equilibrium;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::game::Strategy;
use crate::models::MultimodalModel;
use crate::perturb::{CostCounter, Perturbation};

/// Tolerance on row sums when validating probability inputs.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McrConfig {
    #[serde(default = "one")]
    pub lambda_uni: f64,
    #[serde(default = "one", rename = "lambda_M", alias = "lambda_m")]
    pub lambda_m: f64,
    #[serde(default = "default_con")]
    pub lambda_con: f64,
    #[serde(default = "default_ceb")]
    pub lambda_ceb: f64,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub perturbation: Perturbation,
    #[serde(default = "default_tau")]
    pub contrastive_temperature: f64,
    /// Multiplier on MIPD gradients reaching the fusion network.
    #[serde(default = "one")]
    pub fusion_k: f64,
}

fn one() -> f64 {
    1.0
}
fn default_con() -> f64 {
    0.1
}
fn default_ceb() -> f64 {
    0.01
}
fn default_tau() -> f64 {
    0.1
}

impl Default for McrConfig {
    fn default() -> Self {
        Self {
            lambda_uni: 1.0,
            lambda_m: 1.0,
            lambda_con: default_con(),
            lambda_ceb: default_ceb(),
            strategy: Strategy::Greedy,
            perturbation: Perturbation::default(),
            contrastive_temperature: default_tau(),
            fusion_k: 1.0,
        }
    }
}

impl McrConfig {
    /// Every regularizer switched off.
    pub fn disabled() -> Self {
        Self {
            lambda_uni: 0.0,
            lambda_m: 0.0,
            lambda_con: 0.0,
            lambda_ceb: 0.0,
            ..Self::default()
        }
    }

    pub fn n_perm(&self) -> usize {
        self.perturbation.n_samples
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_uni", self.lambda_uni),
            ("lambda_M", self.lambda_m),
            ("lambda_con", self.lambda_con),
            ("lambda_ceb", self.lambda_ceb),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a non-negative number")));
            }
        }
        if !(self.contrastive_temperature > 0.0) {
            return Err(Error::Config("contrastive_temperature must be positive".into()));
        }
        self.perturbation.validate()
    }
}

/// Per-step values of every loss term, before weighting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub task: f64,
    pub uni: Vec<f64>,
    pub mipd: Vec<f64>,
    pub con: f64,
    pub ceb: f64,
    pub total: f64,
}

impl LossReport {
    /// `task + l_uni * sum(uni) + l_M * sum(mipd) + l_con * con + l_ceb * ceb`.
    pub fn weighted_total(&self, cfg: &McrConfig) -> f64 {
        self.task
            + cfg.lambda_uni * self.uni.iter().sum::<f64>()
            + cfg.lambda_m * self.mipd.iter().sum::<f64>()
            + cfg.lambda_con * self.con
            + cfg.lambda_ceb * self.ceb
    }

    /// Running mean helper: adds `other` scaled by `w`.
    pub fn add_scaled(&mut self, other: &LossReport, w: f64) {
        fn add(a: &mut Vec<f64>, b: &[f64], w: f64) {
            if a.len() < b.len() {
                a.resize(b.len(), 0.0);
            }
            a.iter_mut().zip(b).for_each(|(x, y)| *x += w * y);
        }
        self.task += w * other.task;
        add(&mut self.uni, &other.uni, w);
        add(&mut self.mipd, &other.mipd, w);
        self.con += w * other.con;
        self.ceb += w * other.ceb;
        self.total += w * other.total;
    }
}

/// Mean negative log-likelihood of the true class.
pub fn cross_entropy(g: &mut Graph, logits: Var, y: &[usize]) -> Result<Var> {
    let (r, c) = g.shape(logits);
    if y.len() != r {
        return Err(Error::Shape {
            op: "cross_entropy",
            detail: format!("{} labels for {r} rows", y.len()),
        });
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label: bad, classes: c });
    }
    let lp = g.log_softmax_rows(logits);
    let picked = g.pick_cols(lp, y)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

fn check_simplex(g: &Graph, v: Var) -> Result<()> {
    let (_, c) = g.shape(v);
    for (row, vals) in g.value(v).chunks(c).enumerate() {
        let sum: f64 = vals.iter().sum();
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min >= 0.0) || !((sum - 1.0).abs() <= SIMPLEX_TOL) {
            return Err(Error::InvalidSimplex { row, sum, min });
        }
    }
    Ok(())
}

fn kl_rows_sum(g: &mut Graph, p: Var, m_log: Var) -> Result<Var> {
    let lp = g.ln(p);
    let diff = g.sub(lp, m_log)?;
    let prod = g.mul(p, diff)?;
    Ok(g.sum(prod))
}

/// Batch mean of the per-row Jensen-Shannon divergence, in nats.
pub fn jsd(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    let (r, c) = g.shape(p);
    if g.shape(q) != (r, c) {
        let (qr, qc) = g.shape(q);
        return Err(Error::Shape {
            op: "jsd",
            detail: format!("{r}x{c} vs {qr}x{qc}"),
        });
    }
    check_simplex(g, p)?;
    check_simplex(g, q)?;
    let s = g.add(p, q)?;
    let m = g.scale(s, 0.5);
    let lm = g.ln(m);
    let kp = kl_rows_sum(g, p, lm)?;
    let kq = kl_rows_sum(g, q, lm)?;
    let both = g.add(kp, kq)?;
    Ok(g.scale(both, 0.5 / r as f64))
}

/// Negative mean JSD between the clean prediction and the predictions with
/// one modality's latent replaced by each perturbed version.
pub fn mipd_from_perturbed(
    g: &mut Graph,
    model: &MultimodalModel,
    latents: &[Var],
    clean_logits: Var,
    modality: usize,
    perturbed: &[Var],
    counter: &mut CostCounter,
) -> Result<Var> {
    mipd_subset_from_perturbed(g, model, latents, clean_logits, &[modality], &[perturbed.to_vec()], counter)
}

/// Like [`mipd_from_perturbed`] but replaces every modality in `subset` at
/// once; `perturbed[k][e]` is draw `e` for `subset[k]`.
pub fn mipd_subset_from_perturbed(
    g: &mut Graph,
    model: &MultimodalModel,
    latents: &[Var],
    clean_logits: Var,
    subset: &[usize],
    perturbed: &[Vec<Var>],
    counter: &mut CostCounter,
) -> Result<Var> {
    let draws = perturbed.first().map_or(0, Vec::len);
    if draws == 0 || perturbed.len() != subset.len() || perturbed.iter().any(|p| p.len() != draws) {
        return Err(Error::Config("MIPD needs the same non-zero number of draws per modality".into()));
    }
    let p = g.softmax_rows(clean_logits);
    let mut acc: Option<Var> = None;
    for e in 0..draws {
        let mut zs = latents.to_vec();
        for (k, &m) in subset.iter().enumerate() {
            let slot = zs.get_mut(m).ok_or_else(|| Error::Modality {
                modality: m,
                detail: "subset refers to a missing modality".into(),
            })?;
            *slot = perturbed[k][e];
        }
        let logits = model.fused_forward_from_latents(g, &zs, counter)?;
        let q = g.softmax_rows(logits);
        let d = jsd(g, p, q)?;
        acc = Some(match acc {
            Some(a) => g.add(a, d)?,
            None => d,
        });
    }
    let total = acc.expect("at least one draw");
    Ok(g.scale(total, -1.0 / draws as f64))
}

/// MIPD of `modality` under within-batch permutations of its latent rows.
/// Lies in `[-ln 2, 0]`; more negative means the modality matters more.
pub fn mipd_loss(
    g: &mut Graph,
    model: &MultimodalModel,
    latents: &[Var],
    clean_logits: Var,
    modality: usize,
    sigmas: &[Vec<usize>],
    counter: &mut CostCounter,
) -> Result<Var> {
    mipd_subset_loss(g, model, latents, clean_logits, &[modality], sigmas, counter)
}

/// Permutes all modalities in `subset` with the same permutation per draw.
pub fn mipd_subset_loss(
    g: &mut Graph,
    model: &MultimodalModel,
    latents: &[Var],
    clean_logits: Var,
    subset: &[usize],
    sigmas: &[Vec<usize>],
    counter: &mut CostCounter,
) -> Result<Var> {
    let mut perturbed = Vec::with_capacity(subset.len());
    for &m in subset {
        let z = *latents.get(m).ok_or_else(|| Error::Modality {
            modality: m,
            detail: "no latent for modality".into(),
        })?;
        perturbed.push(sigmas.iter().map(|s| g.permute_rows(z, s)).collect::<Result<Vec<_>>>()?);
    }
    mipd_subset_from_perturbed(g, model, latents, clean_logits, subset, &perturbed, counter)
}

/// Row weights for the supervised contrastive loss: `w[i][k] = [y_i == y_k] /
/// |P_i| / n_anchors`, with anchors lacking positives left at zero.
fn positive_weights(y: &[usize]) -> Result<Vec<f64>> {
    let b = y.len();
    let mut w = vec![0.0; b * b];
    let counts: Vec<usize> = y.iter().map(|yi| y.iter().filter(|yk| *yk == yi).count()).collect();
    let anchors = counts.iter().filter(|&&c| c > 0).count();
    let skipped = b - anchors;
    if anchors == 0 {
        return Err(Error::Contrastive("no anchor has a positive in the batch".into()));
    }
    if skipped > 0 {
        warn!("supervised contrastive: {skipped} anchors without positives skipped");
    }
    for i in 0..b {
        if counts[i] == 0 {
            continue;
        }
        let wi = 1.0 / (counts[i] as f64 * anchors as f64);
        for k in 0..b {
            if y[k] == y[i] {
                w[i * b + k] = wi;
            }
        }
    }
    Ok(w)
}

/// Supervised contrastive loss between two modalities' latents, symmetrized
/// over both retrieval directions. The critic is `exp(<z1, z2> / tau)` on
/// L2-normalized rows; positives are all same-label rows of the other
/// modality.
pub fn supervised_contrastive(g: &mut Graph, z1: Var, z2: Var, y: &[usize], temperature: f64) -> Result<Var> {
    let (b, d1) = g.shape(z1);
    let (b2, d2) = g.shape(z2);
    if b != b2 || d1 != d2 || y.len() != b {
        return Err(Error::Shape {
            op: "supervised_contrastive",
            detail: format!("{b}x{d1} vs {b2}x{d2} with {} labels", y.len()),
        });
    }
    if b < 2 {
        return Err(Error::Contrastive(format!("batch of {b} is too small")));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let n1 = g.normalize_rows(z1);
    let n2 = g.normalize_rows(z2);
    let n2t = g.transpose(n2);
    let dots = g.matmul(n1, n2t)?;
    let scores = g.scale(dots, 1.0 / temperature);
    contrastive_from_scores(g, scores, y)
}

/// Contrastive loss from a precomputed `B x B` log-critic matrix whose entry
/// `(i, j)` scores modality-1 row `i` against modality-2 row `j`.
pub fn contrastive_from_scores(g: &mut Graph, scores: Var, y: &[usize]) -> Result<Var> {
    let b = y.len();
    let w = g.constant(b, b, positive_weights(y)?)?;
    let l12 = g.log_softmax_rows(scores);
    let st = g.transpose(scores);
    let l21 = g.log_softmax_rows(st);
    let a = g.mul(l12, w)?;
    let c = g.mul(l21, w)?;
    let sa = g.sum(a);
    let sc = g.sum(c);
    let both = g.add(sa, sc)?;
    Ok(g.scale(both, -0.5))
}

/// Mean squared error over all elements; `target` is used as given.
pub fn mse(g: &mut Graph, target: Var, pred: Var) -> Result<Var> {
    let d = g.sub(target, pred)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Reconstruction of the concatenated latent from the fused class
/// probabilities. The latent target is gradient-stopped.
pub fn ceb_loss(g: &mut Graph, model: &MultimodalModel, latents: &[Var], fused_logits: Var) -> Result<Var> {
    let z = g.concat_cols(latents)?;
    let target = g.detach(z);
    let probs = g.softmax_rows(fused_logits);
    let recon = model.recon_forward(g, probs)?;
    if g.shape(recon) != g.shape(target) {
        return Err(Error::Shape {
            op: "ceb_loss",
            detail: "reconstruction width differs from latent width".into(),
        });
    }
    mse(g, target, recon)
}
