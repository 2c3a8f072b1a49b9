//! Training loop for the regularized objective and every baseline.
//!
//! A run is one or two phases. Each phase optimizes one [`Objective`] with
//! SGD, evaluates on the validation split after every epoch and restores the
//! best parameters when it stops.

pub mod eval;

use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamGroup, Role, Sgd, Var};
use crate::error::{Error, Result};
use crate::game::{route_mipd_gradients, StrategyMatrix};
use crate::losses::{
    ceb_loss, cross_entropy, mipd_subset_from_perturbed, supervised_contrastive, LossReport, McrConfig,
};
use crate::models::{Activation, EncoderSpec, ForwardOutput, ModelSpec, MultimodalModel};
use crate::perturb::{apply_perturbation, sample_permutations, CostCounter};
use crate::synthdata::Dataset;

pub use eval::{
    accuracy, argmax_lowest, ensemble_from_probs, ensemble_predict, error_matrix, evaluate_epoch, latents,
    linear_probe, mce_estimate, predict, predict_probs, unimodal_predictions, ErrorMatrix, Predictor,
};

/// Largest modality count accepted by the all-subsets mode.
pub const MAX_SUBSET_MODALITIES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    /// Encoder `m` plus its unimodal head (0-based; written 1-based).
    Unimodal(usize),
    Ensemble,
    Joint,
    MultiLoss,
    UniPreFrozen,
    UniPreFinetuned,
    Mcr,
}

impl Method {
    pub const NAMED: [Method; 6] = [
        Method::Ensemble,
        Method::Joint,
        Method::MultiLoss,
        Method::UniPreFrozen,
        Method::UniPreFinetuned,
        Method::Mcr,
    ];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Unimodal(m) => write!(f, "unimodal-{}", m + 1),
            Method::Ensemble => f.write_str("ensemble"),
            Method::Joint => f.write_str("joint"),
            Method::MultiLoss => f.write_str("multiloss"),
            Method::UniPreFrozen => f.write_str("unipre-frozen"),
            Method::UniPreFinetuned => f.write_str("unipre-finetuned"),
            Method::Mcr => f.write_str("mcr"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("unimodal-") {
            return match rest.parse::<usize>() {
                Ok(m) if m >= 1 => Ok(Method::Unimodal(m - 1)),
                _ => Err(Error::Config(format!("bad unimodal method `{s}`"))),
            };
        }
        Self::NAMED
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubsetMode {
    #[default]
    Singletons,
    AllSubsets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
}

fn default_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    32
}
fn default_patience() -> usize {
    10
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            weight_decay: 0.0,
            momentum: default_momentum(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            early_stop_patience: default_patience(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_encoder_hidden")]
    pub encoder_hidden: Vec<usize>,
    #[serde(default = "default_latent")]
    pub latent_dim: usize,
    #[serde(default = "default_fusion_hidden")]
    pub fusion_hidden: Vec<usize>,
    #[serde(default = "default_recon_hidden")]
    pub recon_hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

fn default_encoder_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_latent() -> usize {
    32
}
fn default_fusion_hidden() -> Vec<usize> {
    vec![64]
}
fn default_recon_hidden() -> Vec<usize> {
    vec![32]
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: default_encoder_hidden(),
            latent_dim: default_latent(),
            fusion_hidden: default_fusion_hidden(),
            recon_hidden: default_recon_hidden(),
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, input_dims: &[usize], n_classes: usize) -> ModelSpec {
        ModelSpec {
            encoders: input_dims
                .iter()
                .map(|&d| EncoderSpec {
                    input_dim: d,
                    hidden_dims: self.encoder_hidden.clone(),
                    latent_dim: self.latent_dim,
                    activation: self.activation,
                })
                .collect(),
            fusion_hidden: self.fusion_hidden.clone(),
            recon_hidden: self.recon_hidden.clone(),
            n_classes,
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    #[serde(default)]
    pub mcr: McrConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub modality_subset_mode: SubsetMode,
    /// Linear probes on each modality's latents after every epoch.
    #[serde(default)]
    pub probe: bool,
}

impl RunConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            mcr: McrConfig::default(),
            optimizer: OptimizerConfig::default(),
            model: ModelConfig::default(),
            seed: 0,
            modality_subset_mode: SubsetMode::Singletons,
            probe: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if o.epochs == 0 {
            return Err(Error::Config("optimizer.epochs must be at least 1".into()));
        }
        if o.batch_size < 2 {
            return Err(Error::Config("optimizer.batch_size must be at least 2".into()));
        }
        if !(o.lr >= 0.0) || !(o.weight_decay >= 0.0) || !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::Config("optimizer lr/weight_decay must be >= 0 and momentum in [0, 1)".into()));
        }
        if self.method == Method::MultiLoss && !(self.mcr.lambda_uni > 0.0) {
            return Err(Error::Config("multiloss needs mcr.lambda_uni > 0".into()));
        }
        self.mcr.validate()
    }

    /// Loss weights actually used by the fused phase of this method.
    pub fn effective_mcr(&self) -> McrConfig {
        match self.method {
            Method::Mcr => self.mcr.clone(),
            Method::MultiLoss => McrConfig {
                lambda_uni: self.mcr.lambda_uni,
                ..McrConfig::disabled()
            },
            _ => McrConfig {
                strategy: self.mcr.strategy,
                perturbation: self.mcr.perturbation.clone(),
                ..McrConfig::disabled()
            },
        }
    }

    pub fn phases(&self) -> Vec<Objective> {
        let fused = |encoder_lr_scale, frozen| Objective::Fused {
            mcr: self.effective_mcr(),
            encoder_lr_scale,
            frozen_encoders: frozen,
        };
        match self.method {
            Method::Unimodal(m) => vec![Objective::Unimodal(m)],
            Method::Ensemble => vec![Objective::UniPaths],
            Method::Joint | Method::MultiLoss | Method::Mcr => vec![fused(1.0, false)],
            Method::UniPreFrozen => vec![Objective::UniPaths, fused(1.0, true)],
            Method::UniPreFinetuned => vec![Objective::UniPaths, fused(0.1, false)],
        }
    }

    pub fn predictor(&self) -> Predictor {
        match self.method {
            Method::Unimodal(m) => Predictor::Unimodal(m),
            Method::Ensemble => Predictor::Ensemble,
            _ => Predictor::Fused,
        }
    }
}

/// What one training phase optimizes.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    Unimodal(usize),
    /// Sum of every unimodal path's task loss.
    UniPaths,
    Fused {
        mcr: McrConfig,
        encoder_lr_scale: f64,
        frozen_encoders: bool,
    },
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Unimodal(_) => "unimodal",
            Objective::UniPaths => "unimodal-paths",
            Objective::Fused { .. } => "fused",
        }
    }

    fn predictor(&self) -> Predictor {
        match self {
            Objective::Unimodal(m) => Predictor::Unimodal(*m),
            Objective::UniPaths => Predictor::Ensemble,
            Objective::Fused { .. } => Predictor::Fused,
        }
    }

    /// Parameter groups this phase updates, with their learning-rate scales.
    fn groups(&self, model: &MultimodalModel) -> Vec<ParamGroup> {
        let all = model.store.groups();
        let keep = |role: Role| -> Option<f64> {
            match (self, role) {
                (Objective::Unimodal(m), Role::Encoder(i) | Role::UniHead(i)) if i == *m => Some(1.0),
                (Objective::UniPaths, Role::Encoder(_) | Role::UniHead(_)) => Some(1.0),
                (
                    Objective::Fused {
                        encoder_lr_scale,
                        frozen_encoders,
                        ..
                    },
                    Role::Encoder(_),
                ) => (!frozen_encoders).then_some(*encoder_lr_scale),
                (Objective::Fused { .. }, Role::Fusion) => Some(1.0),
                (Objective::Fused { mcr, .. }, Role::UniHead(_)) => (mcr.lambda_uni > 0.0).then_some(1.0),
                (Objective::Fused { mcr, .. }, Role::Recon) => (mcr.lambda_ceb > 0.0).then_some(1.0),
                _ => None,
            }
        };
        all.into_iter()
            .filter_map(|mut g| {
                keep(g.role).map(|s| {
                    g.lr_scale = s;
                    g
                })
            })
            .collect()
    }
}

/// Non-empty subsets of `0..m` in singleton-first, then size, then
/// lexicographic order.
pub fn modality_subsets(m: usize, mode: SubsetMode) -> Result<Vec<Vec<usize>>> {
    match mode {
        SubsetMode::Singletons => Ok((0..m).map(|i| vec![i]).collect()),
        SubsetMode::AllSubsets => {
            if m > MAX_SUBSET_MODALITIES {
                return Err(Error::Config(format!(
                    "all-subsets mode supports at most {MAX_SUBSET_MODALITIES} modalities, got {m}"
                )));
            }
            let mut out: Vec<Vec<usize>> = (1u32..(1 << m))
                .map(|mask| (0..m).filter(|i| mask & (1 << i) != 0).collect())
                .collect();
            out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
            Ok(out)
        }
    }
}

/// MIPD term per modality subset. Every modality in a subset is replaced by
/// its perturbed latent from the same draw.
#[allow(clippy::too_many_arguments)]
pub fn mipd_subsets(
    g: &mut Graph,
    model: &MultimodalModel,
    inputs: &[&crate::autodiff::Tensor],
    out: &ForwardOutput,
    subsets: &[Vec<usize>],
    mcr: &McrConfig,
    sigmas: &[Vec<usize>],
    rng: &mut ChaCha8Rng,
    counter: &mut CostCounter,
) -> Result<Vec<(Vec<usize>, Var)>> {
    let m = model.n_modalities();
    let mut perturbed: Vec<Option<Vec<Var>>> = vec![None; m];
    let mut terms = Vec::with_capacity(subsets.len());
    for s in subsets {
        let mut parts = Vec::with_capacity(s.len());
        for &i in s {
            if perturbed[i].is_none() {
                perturbed[i] = Some(apply_perturbation(
                    &mcr.perturbation,
                    model,
                    g,
                    inputs,
                    &out.latents,
                    i,
                    sigmas,
                    rng,
                    counter,
                )?);
            }
            parts.push(perturbed[i].clone().expect("filled above"));
        }
        let t = mipd_subset_from_perturbed(g, model, &out.latents, out.fused, s, &parts, counter)?;
        terms.push((s.clone(), t));
    }
    Ok(terms)
}

/// Mean supervised contrastive loss over all modality pairs.
pub fn pairwise_contrastive(g: &mut Graph, latents: &[Var], y: &[usize], temperature: f64) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    let mut n = 0usize;
    for i in 0..latents.len() {
        for j in i + 1..latents.len() {
            let l = supervised_contrastive(g, latents[i], latents[j], y, temperature)?;
            acc = Some(match acc {
                Some(a) => g.add(a, l)?,
                None => l,
            });
            n += 1;
        }
    }
    Ok(acc.map(|a| g.scale(a, 1.0 / n as f64)))
}

/// Mutable state of one run: the model, the optimizer and the random
/// streams for data order and perturbations.
pub struct Trainer {
    pub config: RunConfig,
    pub model: MultimodalModel,
    sgd: Sgd,
    order_rng: ChaCha8Rng,
    perturb_rng: ChaCha8Rng,
    pub steps: usize,
    pub cost: CostCounter,
    /// Negates the greedy off-diagonal multipliers; used by the verifier to
    /// check that its gradient checks detect a routing bug.
    pub flip_greedy_sign: bool,
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

impl Trainer {
    pub fn new(config: RunConfig, input_dims: &[usize], n_classes: usize) -> Result<Self> {
        config.validate()?;
        let spec = config.model.spec(input_dims, n_classes);
        let model = MultimodalModel::new(spec, config.seed)?;
        let o = &config.optimizer;
        let sgd = Sgd::new(o.lr, o.weight_decay, o.momentum);
        let m = input_dims.len();
        Ok(Self {
            order_rng: stream(config.seed, 1),
            perturb_rng: stream(config.seed, 2),
            config,
            model,
            sgd,
            steps: 0,
            cost: CostCounter::new(m),
            flip_greedy_sign: false,
        })
    }

    fn strategy_matrix(&self, mcr: &McrConfig, subsets: &[Vec<usize>]) -> StrategyMatrix {
        let mut k = StrategyMatrix::for_subsets(mcr.strategy, self.model.n_modalities(), subsets);
        k.fusion_k.iter_mut().for_each(|f| *f = mcr.fusion_k);
        if self.flip_greedy_sign {
            k.flip_negative();
        }
        k
    }

    /// One optimizer update on `batch`. Returns the unweighted terms and the
    /// forward passes spent.
    pub fn step(&mut self, objective: &Objective, batch: &Dataset) -> Result<(LossReport, CostCounter)> {
        let step = self.steps;
        self.steps += 1;
        let res = self.step_inner(objective, batch);
        match res {
            Err(Error::NonFiniteGradient { op }) => Err(Error::Diverged {
                step,
                detail: format!("non-finite gradient in {op}"),
            }),
            Ok((r, _)) if !r.total.is_finite() => Err(Error::Diverged {
                step,
                detail: format!("loss is {}", r.total),
            }),
            other => other,
        }
    }

    fn step_inner(&mut self, objective: &Objective, batch: &Dataset) -> Result<(LossReport, CostCounter)> {
        let m = self.model.n_modalities();
        let mut counter = CostCounter::new(m);
        let inputs: Vec<&crate::autodiff::Tensor> = batch.x.iter().collect();
        let y = &batch.y;
        let mut report = LossReport::default();
        let mut g = Graph::new();
        self.model.store.zero_grad();
        let groups = objective.groups(&self.model);
        match objective {
            Objective::Unimodal(i) => {
                let logits = self.model.unimodal_model_forward(&mut g, *i, inputs[*i], &mut counter)?;
                let l = cross_entropy(&mut g, logits, y)?;
                report.uni = vec![0.0; m];
                report.uni[*i] = g.scalar(l);
                report.total = report.uni[*i];
                let grads = g.backward(l)?;
                self.model.store.accumulate(&grads, |_| 1.0);
            }
            Objective::UniPaths => {
                let mut total: Option<Var> = None;
                for (i, x) in inputs.iter().enumerate() {
                    let logits = self.model.unimodal_model_forward(&mut g, i, x, &mut counter)?;
                    let l = cross_entropy(&mut g, logits, y)?;
                    report.uni.push(g.scalar(l));
                    total = Some(match total {
                        Some(t) => g.add(t, l)?,
                        None => l,
                    });
                }
                let total = total.expect("at least one modality");
                report.total = g.scalar(total);
                let grads = g.backward(total)?;
                self.model.store.accumulate(&grads, |_| 1.0);
            }
            Objective::Fused { mcr, .. } => {
                let out = self.model.forward(&mut g, &inputs, &mut counter)?;
                let task = cross_entropy(&mut g, out.fused, y)?;
                report.task = g.scalar(task);
                let mut total = task;
                if mcr.lambda_uni > 0.0 {
                    for u in &out.unimodal {
                        let l = cross_entropy(&mut g, *u, y)?;
                        report.uni.push(g.scalar(l));
                        let w = g.scale(l, mcr.lambda_uni);
                        total = g.add(total, w)?;
                    }
                }
                if mcr.lambda_con > 0.0 {
                    if let Some(l) = pairwise_contrastive(&mut g, &out.latents, y, mcr.contrastive_temperature)? {
                        report.con = g.scalar(l);
                        let w = g.scale(l, mcr.lambda_con);
                        total = g.add(total, w)?;
                    }
                }
                if mcr.lambda_ceb > 0.0 {
                    let l = ceb_loss(&mut g, &self.model, &out.latents, out.fused)?;
                    report.ceb = g.scalar(l);
                    let w = g.scale(l, mcr.lambda_ceb);
                    total = g.add(total, w)?;
                }
                let grads = g.backward(total)?;
                self.model.store.accumulate(&grads, |_| 1.0);
                if mcr.lambda_m > 0.0 {
                    let sigmas = sample_permutations(y.len(), mcr.n_perm(), &mut self.perturb_rng)?;
                    let subsets = modality_subsets(m, self.config.modality_subset_mode)?;
                    let terms = mipd_subsets(
                        &mut g,
                        &self.model,
                        &inputs,
                        &out,
                        &subsets,
                        mcr,
                        &sigmas,
                        &mut self.perturb_rng,
                        &mut counter,
                    )?;
                    let vars: Vec<Var> = terms.iter().map(|t| t.1).collect();
                    report.mipd = vars.iter().map(|v| g.scalar(*v)).collect();
                    let k = self.strategy_matrix(mcr, &subsets);
                    route_mipd_gradients(&g, &vars, &mut self.model.store, &k, mcr.lambda_m)?;
                }
                report.total = report.weighted_total(mcr);
            }
        }
        self.sgd.step(&mut self.model.store, &groups)?;
        self.cost.merge(&counter);
        Ok((report, counter))
    }

    /// Shuffled mini-batches of `data`; a trailing single row joins the
    /// previous batch.
    pub fn batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.order_rng);
        let bs = self.config.optimizer.batch_size;
        let mut out: Vec<Vec<usize>> = idx.chunks(bs).map(<[usize]>::to_vec).collect();
        if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
            let last = out.pop().expect("non-empty");
            out.last_mut().expect("non-empty").extend(last);
        }
        out
    }

    pub fn run_epoch(&mut self, objective: &Objective, data: &Dataset) -> Result<LossReport> {
        let batches = self.batches(data.len());
        let mut mean = LossReport::default();
        let w = 1.0 / batches.len() as f64;
        for b in batches {
            let (r, _) = self.step(objective, &data.select(&b))?;
            mean.add_scaled(&r, w);
        }
        Ok(mean)
    }
}

/// Everything logged after one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub train: LossReport,
    pub val: LossReport,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub importance: Vec<f64>,
    pub importance_sum: f64,
    pub probe_accuracy: Vec<f64>,
    pub jsd_matching: Option<f64>,
    pub jsd_nonmatching: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: MultimodalModel,
    pub records: Vec<EpochRecord>,
    pub cost: CostCounter,
    pub steps: usize,
    /// Epoch whose parameters were kept, per phase.
    pub best_epochs: Vec<usize>,
}

/// Splits used by [`train`].
#[derive(Debug, Clone, Copy)]
pub struct Splits<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: &'a Dataset,
}

pub fn train(config: &RunConfig, data: Splits<'_>) -> Result<TrainOutput> {
    for d in [data.train, data.val, data.test] {
        d.validate()?;
    }
    if data.train.len() < 2 || data.val.is_empty() {
        return Err(Error::Config("train split needs at least 2 rows and val at least 1".into()));
    }
    let dims: Vec<usize> = data.train.x.iter().map(|t| t.cols()).collect();
    let mut trainer = Trainer::new(config.clone(), &dims, data.train.n_classes)?;
    if let Method::Unimodal(m) = config.method {
        if m >= dims.len() {
            return Err(Error::Modality {
                modality: m,
                detail: "unimodal method refers to a missing modality".into(),
            });
        }
    }
    let mut records = Vec::new();
    let mut best_epochs = Vec::new();
    let patience = config.optimizer.early_stop_patience;
    let mut epoch = 0;
    for (phase_idx, objective) in config.phases().iter().enumerate() {
        if let Objective::Fused { frozen_encoders: true, .. } = objective {
            for i in 0..dims.len() {
                trainer.model.store.set_requires_grad(Role::Encoder(i), false);
            }
        }
        let mut best = (f64::NEG_INFINITY, trainer.model.store.snapshot(), epoch);
        let mut since_best = 0;
        for _ in 0..config.optimizer.epochs {
            let train_report = trainer.run_epoch(objective, data.train)?;
            let mut eval_rng = stream(config.seed, 100 + epoch as u64);
            let rec = evaluate_epoch(
                &trainer.model,
                objective.predictor(),
                objective,
                config,
                data,
                epoch,
                train_report,
                &mut eval_rng,
            )?;
            debug!(
                "epoch {epoch} phase {} val_acc {:.4} importance {:?}",
                objective.name(),
                rec.val_accuracy,
                rec.importance
            );
            let acc = rec.val_accuracy;
            records.push(rec);
            epoch += 1;
            if acc > best.0 {
                best = (acc, trainer.model.store.snapshot(), epoch - 1);
                since_best = 0;
            } else {
                since_best += 1;
                if patience > 0 && since_best >= patience {
                    info!("phase {phase_idx}: early stop after epoch {}", epoch - 1);
                    break;
                }
            }
        }
        trainer.model.store.restore(&best.1);
        best_epochs.push(best.2);
    }
    Ok(TrainOutput {
        steps: trainer.steps,
        cost: trainer.cost.clone(),
        model: trainer.model,
        records,
        best_epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, SyntheticSpec};

    fn tiny() -> crate::synthdata::SyntheticData {
        generate(&SyntheticSpec {
            n_train: 64,
            n_val: 32,
            n_test: 32,
            dim: 6,
            n_classes: 3,
            seed: 1,
            ..Default::default()
        })
        .unwrap()
    }

    fn small(method: Method) -> RunConfig {
        let mut c = RunConfig::new(method);
        c.model = ModelConfig {
            encoder_hidden: vec![8],
            latent_dim: 4,
            fusion_hidden: vec![8],
            recon_hidden: vec![4],
            activation: Activation::Relu,
        };
        c.optimizer.epochs = 2;
        c.optimizer.batch_size = 16;
        c
    }

    fn splits(d: &crate::synthdata::SyntheticData) -> Splits<'_> {
        Splits {
            train: &d.train,
            val: &d.val,
            test: &d.test,
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::NAMED.into_iter().chain([Method::Unimodal(0), Method::Unimodal(2)]) {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert_eq!("unimodal-2".parse::<Method>().unwrap(), Method::Unimodal(1));
        assert!("unimodal-0".parse::<Method>().is_err());
        assert!("adam".parse::<Method>().is_err());
    }

    #[test]
    fn joint_equals_mcr_with_zero_weights() {
        let d = tiny();
        let joint = train(&small(Method::Joint), splits(&d)).unwrap();
        let mut c = small(Method::Mcr);
        c.mcr = McrConfig::disabled();
        let mcr = train(&c, splits(&d)).unwrap();
        assert_eq!(joint.model.store.snapshot(), mcr.model.store.snapshot());
    }

    #[test]
    fn zero_lr_leaves_params() {
        let d = tiny();
        let mut c = small(Method::Mcr);
        c.optimizer.lr = 0.0;
        c.optimizer.epochs = 1;
        let before = MultimodalModel::new(c.model.spec(&[6, 6], 3), c.seed).unwrap();
        let out = train(&c, splits(&d)).unwrap();
        assert_eq!(before.store.snapshot(), out.model.store.snapshot());
        assert!(out.records[0].train.total.is_finite());
    }

    #[test]
    fn deterministic_records() {
        let d = tiny();
        let c = small(Method::Mcr);
        let a = train(&c, splits(&d)).unwrap();
        let b = train(&c, splits(&d)).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.model.store.snapshot(), b.model.store.snapshot());
    }

    #[test]
    fn frozen_encoders_bit_identical() {
        let d = tiny();
        let mut c = small(Method::UniPreFrozen);
        c.optimizer.epochs = 1;
        let mut phase1 = c.clone();
        phase1.method = Method::Ensemble;
        let after_phase1 = train(&phase1, splits(&d)).unwrap();
        let out = train(&c, splits(&d)).unwrap();
        for m in 0..2 {
            for id in out.model.encoder_params(m) {
                assert_eq!(out.model.store.get(id).values(), after_phase1.model.store.get(id).values());
            }
        }
        let fused: Vec<_> = out.model.fusion_params();
        assert!(fused
            .iter()
            .any(|id| out.model.store.get(*id).values() != after_phase1.model.store.get(*id).values()));
    }

    #[test]
    fn multiloss_needs_uni_weight() {
        let mut c = small(Method::MultiLoss);
        c.mcr.lambda_uni = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn subsets_enumerated() {
        assert_eq!(
            modality_subsets(2, SubsetMode::AllSubsets).unwrap(),
            vec![vec![0], vec![1], vec![0, 1]]
        );
        assert_eq!(modality_subsets(3, SubsetMode::AllSubsets).unwrap().len(), 7);
        assert!(modality_subsets(5, SubsetMode::AllSubsets).is_err());
        assert_eq!(modality_subsets(3, SubsetMode::Singletons).unwrap().len(), 3);
    }

    #[test]
    fn singleton_subsets_match_mipd_loss() {
        let d = tiny();
        let model = MultimodalModel::new(small(Method::Mcr).model.spec(&[6, 6], 3), 3).unwrap();
        let mut g = Graph::new();
        let mut c = CostCounter::new(2);
        let inputs: Vec<_> = d.val.x.iter().collect();
        let out = model.forward(&mut g, &inputs, &mut c).unwrap();
        let mut rng = stream(0, 0);
        let sigmas = sample_permutations(d.val.len(), 2, &mut rng).unwrap();
        let subs = modality_subsets(2, SubsetMode::Singletons).unwrap();
        let terms = mipd_subsets(
            &mut g,
            &model,
            &inputs,
            &out,
            &subs,
            &McrConfig {
                perturbation: crate::perturb::Perturbation {
                    n_samples: 2,
                    ..Default::default()
                },
                ..McrConfig::default()
            },
            &sigmas,
            &mut rng,
            &mut c,
        )
        .unwrap();
        for (m, (_, t)) in terms.iter().enumerate() {
            let l = crate::losses::mipd_loss(&mut g, &model, &out.latents, out.fused, m, &sigmas, &mut c).unwrap();
            assert_eq!(g.scalar(*t).to_bits(), g.scalar(l).to_bits());
        }
    }

    #[test]
    fn diverging_run_reports_step() {
        let d = tiny();
        let mut c = small(Method::Joint);
        c.optimizer.lr = 1e200;
        c.optimizer.momentum = 0.0;
        match train(&c, splits(&d)) {
            Err(Error::Diverged { step, .. }) => assert!(step >= 1),
            other => panic!("{other:?}"),
        }
    }
}
