//! Property suite behind `mcr verify`: exact oracles, finite-difference
//! gradient checks, the equilibrium identity, information-theoretic
//! identities and bounds, cost accounting and determinism.

use std::f64::consts::LN_2;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::autodiff::{Graph, ParamStore, Role, Tensor, Var};
use crate::error::{Error, Result};
use crate::experiment::{self, Experiment};
use crate::game::{route_mipd_gradients, Strategy, StrategyMatrix};
use crate::losses::equilibrium::{analytic_mipd_gradient_check, routed_encoder_gradient, ToyGameModel, EQUILIBRIUM_TOL};
use crate::losses::{ceb_loss, cross_entropy, jsd, mipd_loss, supervised_contrastive, McrConfig};
use crate::models::{Activation, MultimodalModel};
use crate::perturb::{sample_permutations, CostCounter, PerturbationKind};
use crate::synthdata::{
    contrastive_bound_rhs, mi_oracle, optimal_critic_contrastive, DiscreteJoint, MiQuantity, SyntheticSpec,
};
use crate::trainer::{Method, ModelConfig, RunConfig, Trainer};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-5;
pub const GRAD_SEEDS: u64 = 20;
pub const EQUILIBRIUM_SEEDS: u64 = 10;
pub const MI_JOINTS: u64 = 100;
pub const MI_TOL: f64 = 1e-12;
pub const BOUND_JOINTS: u64 = 50;
pub const BOUND_SLACK: f64 = 1e-9;
pub const ROUTING_TOL: f64 = 1e-10;
pub const ENUMERATION_CAP: u128 = 2_000_000;

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    /// Only checks whose name contains this substring.
    pub filter: Option<String>,
    /// Mutation canary: greedy routing sends `+1` instead of `-1`.
    pub flip_greedy_sign: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

type Check = fn(&VerifyOptions) -> Result<(bool, String)>;

pub const CHECKS: [(&str, Check); 14] = [
    ("jsd-oracles", check_jsd_oracles),
    ("jsd-symmetry-bounds", check_jsd_symmetry),
    ("gradcheck-cross-entropy", check_grad_ce),
    ("gradcheck-jsd", check_grad_jsd),
    ("gradcheck-mipd", check_grad_mipd),
    ("gradcheck-contrastive", check_grad_contrastive),
    ("gradcheck-ceb", check_grad_ceb),
    ("equilibrium-identity", check_equilibrium),
    ("equilibrium-routed", check_equilibrium_routed),
    ("greedy-routing", check_greedy_routing),
    ("mi-identity", check_mi_identity),
    ("contrastive-bound", check_contrastive_bound),
    ("cost-invariants", check_cost),
    ("determinism", check_determinism),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.0).collect()
}

/// Runs the selected checks in order. A check that errors counts as failed.
pub fn run_checks(opts: &VerifyOptions) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .filter(|(name, _)| opts.filter.as_deref().is_none_or(|f| name.contains(f)))
        .map(|(name, check)| {
            let t = Instant::now();
            let (passed, detail) = match check(opts) {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckResult {
                name: name.to_string(),
                passed,
                detail,
                seconds: t.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

fn normal_tensor(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = Normal::new(0.0, std).expect("positive std");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| n.sample(rng)).collect()).expect("sized")
}

/// Direct summation, independent of the graph implementation.
fn jsd_direct(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).ln())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}

fn jsd_rows(p: &[f64], q: &[f64], cols: usize) -> Result<f64> {
    let rows = p.len() / cols;
    let mut g = Graph::new();
    let pv = g.constant(rows, cols, p.to_vec())?;
    let qv = g.constant(rows, cols, q.to_vec())?;
    let j = jsd(&mut g, pv, qv)?;
    Ok(g.scalar(j))
}

fn check_jsd_oracles(_: &VerifyOptions) -> Result<(bool, String)> {
    let same = jsd_rows(&[0.3, 0.7], &[0.3, 0.7], 2)?;
    let disjoint = jsd_rows(&[1.0, 0.0], &[0.0, 1.0], 2)?;
    let half = jsd_rows(&[0.5, 0.5], &[1.0, 0.0], 2)?;
    let half_oracle = jsd_direct(&[0.5, 0.5], &[1.0, 0.0]);
    let ok = same.abs() < 1e-15
        && (disjoint - LN_2).abs() < 1e-12
        && (half - half_oracle).abs() < 1e-12
        && (half - 0.215762).abs() < 1e-6;
    Ok((
        ok,
        format!("identical={same:.3e} disjoint={disjoint:.6} (ln2={LN_2:.6}) half={half:.6} oracle={half_oracle:.6} nats"),
    ))
}

fn check_jsd_symmetry(_: &VerifyOptions) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_asym: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    let mut max_val: f64 = 0.0;
    let mut min_val = f64::INFINITY;
    for _ in 0..200 {
        let c = rng.random_range(2..6);
        let draw = |rng: &mut ChaCha8Rng| {
            let mut v: Vec<f64> = (0..c).map(|_| rng.random::<f64>().powi(3)).collect();
            if rng.random::<f64>() < 0.2 {
                v[0] = 0.0;
            }
            let s: f64 = v.iter().sum();
            if s == 0.0 {
                v[1] = 1.0;
                return v;
            }
            v.iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let p = draw(&mut rng);
        let q = draw(&mut rng);
        let a = jsd_rows(&p, &q, c)?;
        let b = jsd_rows(&q, &p, c)?;
        worst_asym = worst_asym.max((a - b).abs());
        worst_oracle = worst_oracle.max((a - jsd_direct(&p, &q)).abs());
        max_val = max_val.max(a);
        min_val = min_val.min(a);
    }
    let ok = worst_asym == 0.0 && worst_oracle < 1e-12 && min_val >= 0.0 && max_val <= LN_2 + 1e-12;
    Ok((
        ok,
        format!("200 pairs: max|jsd(p,q)-jsd(q,p)|={worst_asym:.1e} max|graph-direct|={worst_oracle:.1e} range=[{min_val:.3e}, {max_val:.4}]"),
    ))
}

/// Relative error `|ad - fd| / max(|ad|, |fd|)` over all entries of the
/// parameters whose role passes `include`, plus the larger gradient norm.
fn gradcheck<T: Clone>(
    state: &T,
    store_of: fn(&mut T) -> &mut ParamStore,
    include: fn(Role) -> bool,
    eval: impl Fn(&T) -> Result<(Graph, Var)>,
) -> Result<(f64, f64)> {
    let (g, root) = eval(state)?;
    let grads = g.backward(root)?;
    let mut work = state.clone();
    let ids: Vec<_> = {
        let store = store_of(&mut work);
        store.ids().filter(|id| include(store.role(*id))).collect()
    };
    let mut ad = Vec::new();
    let mut fd = Vec::new();
    for id in ids {
        let len = store_of(&mut work).get(id).len();
        match grads.param(id) {
            Some(gr) => ad.extend_from_slice(gr),
            None => ad.extend(std::iter::repeat_n(0.0, len)),
        }
        for k in 0..len {
            let orig = store_of(&mut work).get(id).values()[k];
            let mut f = [0.0; 2];
            for (slot, delta) in [FD_STEP, -FD_STEP].into_iter().enumerate() {
                store_of(&mut work).get_mut(id).values_mut()[k] = orig + delta;
                let (g2, r2) = eval(&work)?;
                f[slot] = g2.scalar(r2);
            }
            store_of(&mut work).get_mut(id).values_mut()[k] = orig;
            fd.push((f[0] - f[1]) / (2.0 * FD_STEP));
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = ad.iter().zip(&fd).map(|(a, b)| a - b).collect();
    let scale = norm(&ad).max(norm(&fd));
    Ok((norm(&diff) / scale.max(1e-300), scale))
}

fn summarize_grads(name: &str, errs: &[(f64, f64)]) -> (bool, String) {
    let worst = errs.iter().map(|e| e.0).fold(0.0, f64::max);
    let min_norm = errs.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
    let ok = errs.len() as u64 >= GRAD_SEEDS && worst < FD_TOL && min_norm > 0.0;
    (
        ok,
        format!(
            "{name}: {} instances, max rel err {worst:.2e} (tol {FD_TOL:.0e}, h={FD_STEP:.0e}), min grad norm {min_norm:.2e}",
            errs.len()
        ),
    )
}

fn identity_store(s: &mut ParamStore) -> &mut ParamStore {
    s
}

fn model_store(m: &mut MultimodalModel) -> &mut ParamStore {
    &mut m.store
}

fn check_grad_ce(_: &VerifyOptions) -> Result<(bool, String)> {
    let mut errs = Vec::new();
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (b, c) = (rng.random_range(2..7), rng.random_range(2..6));
        let y: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let mut store = ParamStore::new();
        let id = store.add("logits", Role::Fusion, normal_tensor(b, c, 2.0, &mut rng));
        errs.push(gradcheck(&store, identity_store, |_| true, |s| {
            let mut g = Graph::new();
            let l = g.param(s, id);
            let v = cross_entropy(&mut g, l, &y)?;
            Ok((g, v))
        })?);
    }
    Ok(summarize_grads("cross-entropy wrt logits", &errs))
}

fn check_grad_jsd(_: &VerifyOptions) -> Result<(bool, String)> {
    let mut errs = Vec::new();
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let (b, c) = (rng.random_range(2..7), rng.random_range(2..6));
        let mut store = ParamStore::new();
        let a = store.add("a", Role::Fusion, normal_tensor(b, c, 1.5, &mut rng));
        let bb = store.add("b", Role::Fusion, normal_tensor(b, c, 1.5, &mut rng));
        errs.push(gradcheck(&store, identity_store, |_| true, |s| {
            let mut g = Graph::new();
            let av = g.param(s, a);
            let bv = g.param(s, bb);
            let p = g.softmax_rows(av);
            let q = g.softmax_rows(bv);
            let v = jsd(&mut g, p, q)?;
            Ok((g, v))
        })?);
    }
    Ok(summarize_grads("jsd(softmax a, softmax b) wrt a, b", &errs))
}

fn small_model(seed: u64, classes: usize) -> Result<MultimodalModel> {
    let cfg = ModelConfig {
        encoder_hidden: vec![5],
        latent_dim: 3,
        fusion_hidden: vec![5],
        recon_hidden: vec![3],
        activation: Activation::Tanh,
    };
    MultimodalModel::new(cfg.spec(&[4, 3], classes), seed)
}

fn check_grad_mipd(_: &VerifyOptions) -> Result<(bool, String)> {
    let mut errs = Vec::new();
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let b = rng.random_range(3..8);
        let model = small_model(seed, 3)?;
        let x1 = normal_tensor(b, 4, 1.0, &mut rng);
        let x2 = normal_tensor(b, 3, 1.0, &mut rng);
        let sigmas = sample_permutations(b, 2, &mut rng)?;
        let modality = (seed % 2) as usize;
        errs.push(gradcheck(&model, model_store, |_| true, |m| {
            let mut g = Graph::new();
            let mut c = CostCounter::new(2);
            let out = m.forward(&mut g, &[&x1, &x2], &mut c)?;
            let v = mipd_loss(&mut g, m, &out.latents, out.fused, modality, &sigmas, &mut c)?;
            Ok((g, v))
        })?);
    }
    Ok(summarize_grads("mipd wrt encoder and fusion params", &errs))
}

fn check_grad_contrastive(_: &VerifyOptions) -> Result<(bool, String)> {
    let mut errs = Vec::new();
    let tau = McrConfig::default().contrastive_temperature;
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let (b, d) = (rng.random_range(2..7), rng.random_range(2..5));
        let y: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
        let mut store = ParamStore::new();
        let z1 = store.add("z1", Role::Encoder(0), normal_tensor(b, d, 1.0, &mut rng));
        let z2 = store.add("z2", Role::Encoder(1), normal_tensor(b, d, 1.0, &mut rng));
        errs.push(gradcheck(&store, identity_store, |_| true, |s| {
            let mut g = Graph::new();
            let a = g.param(s, z1);
            let c = g.param(s, z2);
            let v = supervised_contrastive(&mut g, a, c, &y, tau)?;
            Ok((g, v))
        })?);
    }
    Ok(summarize_grads(&format!("supervised contrastive (tau={tau}) wrt z1, z2"), &errs))
}

fn check_grad_ceb(_: &VerifyOptions) -> Result<(bool, String)> {
    let mut errs = Vec::new();
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let b = rng.random_range(2..7);
        let model = small_model(100 + seed, 4)?;
        let x1 = normal_tensor(b, 4, 1.0, &mut rng);
        let x2 = normal_tensor(b, 3, 1.0, &mut rng);
        // The latent target is gradient-stopped, so only parameters that
        // cannot move it are compared.
        let not_encoder = |r: Role| !matches!(r, Role::Encoder(_));
        errs.push(gradcheck(&model, model_store, not_encoder, |m| {
            let mut g = Graph::new();
            let mut c = CostCounter::new(2);
            let out = m.forward(&mut g, &[&x1, &x2], &mut c)?;
            let v = ceb_loss(&mut g, m, &out.latents, out.fused)?;
            Ok((g, v))
        })?);
    }
    Ok(summarize_grads("ceb wrt recon and fusion params", &errs))
}

struct ToyInstance {
    model: ToyGameModel,
    x1: Tensor,
    x2: Tensor,
    sigmas: Vec<Vec<usize>>,
}

fn toy_instance(seed: u64) -> Result<ToyInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(6000 + seed);
    let b = rng.random_range(3..9);
    let classes = rng.random_range(2..5);
    let model = ToyGameModel::random(3, 2, 4, classes, 0.8, 6000 + seed)?;
    Ok(ToyInstance {
        x1: normal_tensor(b, 3, 1.0, &mut rng),
        x2: normal_tensor(b, 2, 1.0, &mut rng),
        sigmas: sample_permutations(b, 2, &mut rng)?,
        model,
    })
}

fn check_equilibrium(_: &VerifyOptions) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    let mut min_norm = f64::INFINITY;
    for seed in 0..EQUILIBRIUM_SEEDS {
        let t = toy_instance(seed)?;
        let r = analytic_mipd_gradient_check(&t.model, &t.x1, &t.x2, &t.sigmas[0], &t.sigmas[1])?;
        worst = worst.max(r.max_abs_discrepancy);
        min_norm = min_norm.min(r.analytic.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    Ok((
        worst < EQUILIBRIUM_TOL && min_norm > 0.0,
        format!("{EQUILIBRIUM_SEEDS} toy games (B<=8, C<=4): max |autodiff - analytic| {worst:.2e} (tol {EQUILIBRIUM_TOL:.0e}), min analytic norm {min_norm:.2e}"),
    ))
}

fn greedy_matrix(opts: &VerifyOptions, m: usize) -> StrategyMatrix {
    let mut k = StrategyMatrix::new(Strategy::Greedy, m);
    if opts.flip_greedy_sign {
        k.flip_negative();
    }
    k
}

fn check_equilibrium_routed(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for seed in 0..EQUILIBRIUM_SEEDS {
        let t = toy_instance(seed)?;
        let r = analytic_mipd_gradient_check(&t.model, &t.x1, &t.x2, &t.sigmas[0], &t.sigmas[1])?;
        let routed = routed_encoder_gradient(&t.model, &t.x1, &t.x2, &t.sigmas[0], &t.sigmas[1], &greedy_matrix(opts, 2))?;
        let d = routed.iter().zip(&r.analytic).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
        worst = worst.max(d);
    }
    Ok((
        worst < EQUILIBRIUM_TOL,
        format!("{EQUILIBRIUM_SEEDS} toy games: greedy-routed encoder-1 gradient vs analytic, max discrepancy {worst:.2e} (tol {EQUILIBRIUM_TOL:.0e})"),
    ))
}

fn check_greedy_routing(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let model = small_model(200 + seed, 3)?;
        let b = 6;
        let x1 = normal_tensor(b, 4, 1.0, &mut rng);
        let x2 = normal_tensor(b, 3, 1.0, &mut rng);
        let sigmas = sample_permutations(b, 2, &mut rng)?;
        let mut g = Graph::new();
        let mut c = CostCounter::new(2);
        let out = model.forward(&mut g, &[&x1, &x2], &mut c)?;
        let terms: Vec<Var> = (0..2)
            .map(|m| mipd_loss(&mut g, &model, &out.latents, out.fused, m, &sigmas, &mut c))
            .collect::<Result<_>>()?;
        let mut store = model.store.clone();
        store.zero_grad();
        route_mipd_gradients(&g, &terms, &mut store, &greedy_matrix(opts, 2), 1.0)?;
        for i in 0..2 {
            let other = 1 - i;
            let explicit = g.sub(terms[i], terms[other])?;
            let grads = g.backward(explicit)?;
            for id in model.encoder_params(i) {
                let want = grads.param(id).ok_or_else(|| Error::MissingGradient {
                    name: model.store.name(id).to_string(),
                })?;
                let got = store.get(id).grad().ok_or_else(|| Error::MissingGradient {
                    name: model.store.name(id).to_string(),
                })?;
                worst = got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
            }
        }
    }
    Ok((
        worst < ROUTING_TOL,
        format!("5 models: routed greedy vs autodiff of L_i - L_j on encoder i, max abs diff {worst:.2e} (tol {ROUTING_TOL:.0e})"),
    ))
}

fn random_joint(rng: &mut ChaCha8Rng, max: usize) -> DiscreteJoint {
    let (a, b, c) = (rng.random_range(2..=max), rng.random_range(2..=max), rng.random_range(2..=max));
    DiscreteJoint::random(a, b, c, rng)
}

fn check_mi_identity(_: &VerifyOptions) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut min_mi = f64::INFINITY;
    for _ in 0..MI_JOINTS {
        let j = random_joint(&mut rng, 4);
        let v = |q| mi_oracle(&j, q);
        let lhs = v(MiQuantity::Total);
        let rhs = v(MiQuantity::UniqueX1) + v(MiQuantity::UniqueX2) + v(MiQuantity::X1X2) - v(MiQuantity::X1X2GivenY);
        worst = worst.max((lhs - rhs).abs());
        min_mi = MiQuantity::ALL.iter().map(|q| v(*q)).fold(min_mi, f64::min);
    }
    Ok((
        worst < MI_TOL && min_mi >= -MI_TOL,
        format!("{MI_JOINTS} joints (<=4x4x4): max |I(X1,X2;Y) - decomposition| {worst:.2e} nats (tol {MI_TOL:.0e}), min MI {min_mi:.2e}"),
    ))
}

fn check_contrastive_bound(_: &VerifyOptions) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_slack = f64::INFINITY;
    let mut evaluated = 0usize;
    for _ in 0..BOUND_JOINTS {
        let j = random_joint(&mut rng, 3);
        let rhs = contrastive_bound_rhs(&j);
        for n in [2usize, 3] {
            let loss = optimal_critic_contrastive(&j, n, ENUMERATION_CAP)?;
            worst_slack = worst_slack.min(rhs + BOUND_SLACK - ((n as f64).ln() - loss));
            evaluated += 1;
        }
    }
    let fixed = DiscreteJoint::random(2, 2, 2, &mut rng);
    let rhs = contrastive_bound_rhs(&fixed);
    let ns = [2usize, 3, 4, 5];
    let gaps: Vec<f64> = ns
        .iter()
        .map(|&n| optimal_critic_contrastive(&fixed, n, ENUMERATION_CAP).map(|l| rhs - ((n as f64).ln() - l)))
        .collect::<Result<_>>()?;
    let monotone = gaps.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let gaps_text: Vec<String> = ns.iter().zip(&gaps).map(|(n, g)| format!("N={n}:{g:.5}")).collect();
    Ok((
        worst_slack >= 0.0 && monotone,
        format!(
            "{BOUND_JOINTS} joints x N in {{2,3}} ({evaluated} cases, exact enumeration): min slack {worst_slack:.3e} nats; gap on a fixed 2x2x2 joint {}",
            gaps_text.join(" ")
        ),
    ))
}

fn cost_config(method: Method, kind: PerturbationKind) -> RunConfig {
    let mut c = RunConfig::new(method);
    c.model = ModelConfig {
        encoder_hidden: vec![6],
        latent_dim: 3,
        fusion_hidden: vec![6],
        recon_hidden: vec![3],
        activation: Activation::Relu,
    };
    c.optimizer.batch_size = 16;
    c.mcr.perturbation.kind = kind;
    c.mcr.perturbation.n_samples = 4;
    c
}

fn encoder_passes(config: RunConfig, steps: usize) -> Result<(Vec<u64>, u64, usize)> {
    let data = crate::synthdata::generate(&SyntheticSpec {
        n_train: 16,
        n_val: 4,
        n_test: 4,
        dim: 5,
        n_classes: 3,
        seed: 11,
        ..Default::default()
    })?;
    let b = data.train.len();
    let objective = config.phases().remove(0);
    let mut t = Trainer::new(config, &[5, 5], 3)?;
    for _ in 0..steps {
        t.step(&objective, &data.train)?;
    }
    Ok((t.cost.encoder_passes.clone(), t.cost.fusion_passes, b))
}

fn check_cost(_: &VerifyOptions) -> Result<(bool, String)> {
    let steps = 3;
    let (base, base_fusion, b) = encoder_passes(cost_config(Method::Joint, PerturbationKind::PermuteLatent), steps)?;
    let (perm, perm_fusion, _) = encoder_passes(cost_config(Method::Mcr, PerturbationKind::PermuteLatent), steps)?;
    let (noise, _, _) = encoder_passes(cost_config(Method::Mcr, PerturbationKind::NoiseInput), steps)?;
    let expected_extra = (4 * b * steps) as u64;
    let perm_ok = perm == base;
    let noise_extra: Vec<u64> = noise.iter().zip(&base).map(|(n, b)| n - b).collect();
    let noise_ok = noise_extra.iter().all(|&e| e == expected_extra);
    Ok((
        perm_ok && noise_ok,
        format!(
            "B={b}, {steps} steps, n_samples=4: encoder passes baseline {base:?}, permute-latent {perm:?}, noise-input extra per modality {noise_extra:?} (expected {expected_extra}); fusion passes {base_fusion} -> {perm_fusion}"
        ),
    ))
}

fn check_determinism(_: &VerifyOptions) -> Result<(bool, String)> {
    let mut run = cost_config(Method::Mcr, PerturbationKind::PermuteLatent);
    run.optimizer.epochs = 2;
    run.probe = true;
    run.seed = 5;
    let exp = Experiment {
        data: SyntheticSpec {
            n_train: 64,
            n_val: 24,
            n_test: 24,
            dim: 5,
            n_classes: 3,
            seed: 5,
            ..Default::default()
        },
        run,
    };
    let a = experiment::run(&exp, None, true)?;
    let b = experiment::run(&exp, None, true)?;
    let same_csv = a.csv.render() == b.csv.render();
    let same_summary = serde_json::to_string(&a.summary)? == serde_json::to_string(&b.summary)?;
    let same_params = a.output.model.store.snapshot() == b.output.model.store.snapshot();
    Ok((
        same_csv && same_summary && same_params,
        format!(
            "mcr run twice: epoch CSV identical={same_csv}, summary identical={same_summary}, parameters identical={same_params} (hash {})",
            &a.summary.config_hash[..12]
        ),
    ))
}
