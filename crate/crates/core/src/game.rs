//! Constant-sum game over modality importance.
//!
//! Each encoder is a player. The MIPD term of modality `j` is backpropagated
//! once, and encoder `i` receives that gradient scaled by `k[i][j]`:
//!
//! | strategy      | `k[i][i]` | `k[i][j]`, `j != i` |
//! |---------------|-----------|---------------------|
//! | collaborative | +1        | +1                  |
//! | independent   | +1        | 0                   |
//! | greedy        | +1        | -1                  |
//!
//! The fusion network takes every term with `fusion_k[j]` (default +1).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Role, Var};
use crate::error::{Error, Result};
use crate::losses::mipd_loss;
use crate::models::MultimodalModel;
use crate::perturb::CostCounter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Collaborative,
    Independent,
    #[default]
    Greedy,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Collaborative, Strategy::Independent, Strategy::Greedy];

    /// Multiplier for the gradient of a term owned by `own` flowing into the
    /// encoder of a player that does (`true`) or does not own it.
    fn multiplier(self, own: bool) -> f64 {
        match (self, own) {
            (_, true) => 1.0,
            (Strategy::Collaborative, false) => 1.0,
            (Strategy::Independent, false) => 0.0,
            (Strategy::Greedy, false) => -1.0,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Collaborative => "collaborative",
            Strategy::Independent => "independent",
            Strategy::Greedy => "greedy",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// Gradient multipliers: `k[i][t]` scales term `t` into encoder `i`.
/// Terms are per-modality MIPD losses or, in subset mode, per-subset losses.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyMatrix {
    pub k: Vec<Vec<f64>>,
    pub fusion_k: Vec<f64>,
}

impl StrategyMatrix {
    /// Square `M x M` matrix for singleton terms.
    pub fn new(strategy: Strategy, m: usize) -> Self {
        let k = (0..m)
            .map(|i| (0..m).map(|j| strategy.multiplier(i == j)).collect())
            .collect();
        Self { k, fusion_k: vec![1.0; m] }
    }

    /// `M x |subsets|` matrix: a subset's term counts as owned by every
    /// modality inside it.
    pub fn for_subsets(strategy: Strategy, m: usize, subsets: &[Vec<usize>]) -> Self {
        let k = (0..m)
            .map(|i| subsets.iter().map(|s| strategy.multiplier(s.contains(&i))).collect())
            .collect();
        Self {
            k,
            fusion_k: vec![1.0; subsets.len()],
        }
    }

    /// Turns every negative encoder multiplier positive. Test hook for the
    /// verification suite's mutation canary.
    pub fn flip_negative(&mut self) {
        for v in self.k.iter_mut().flatten() {
            *v = v.abs();
        }
    }

    pub fn n_terms(&self) -> usize {
        self.fusion_k.len()
    }

    pub fn n_players(&self) -> usize {
        self.k.len()
    }

    /// Multiplier applied to term `t` for parameters with `role`.
    pub fn scale(&self, role: Role, t: usize) -> f64 {
        match role {
            Role::Encoder(i) => self.k.get(i).map_or(0.0, |row| row[t]),
            Role::Fusion => self.fusion_k[t],
            Role::UniHead(_) | Role::Recon => 0.0,
        }
    }
}

/// Backpropagates each term once and accumulates `weight * k * grad` into
/// the parameter buffers of every role.
pub fn route_mipd_gradients(
    g: &Graph,
    terms: &[Var],
    store: &mut ParamStore,
    matrix: &StrategyMatrix,
    weight: f64,
) -> Result<()> {
    if terms.len() != matrix.n_terms() {
        return Err(Error::Config(format!(
            "{} MIPD terms but strategy matrix has {}",
            terms.len(),
            matrix.n_terms()
        )));
    }
    let roles: Vec<Role> = store.groups().iter().map(|gr| gr.role).collect();
    for i in 0..matrix.n_players() {
        if !roles.contains(&Role::Encoder(i)) {
            return Err(Error::Config(format!("no parameter group for role {}", Role::Encoder(i))));
        }
    }
    if !roles.contains(&Role::Fusion) {
        return Err(Error::Config("no parameter group for role fusion".into()));
    }
    for (t, term) in terms.iter().enumerate() {
        let grads = g.backward(*term)?;
        store.accumulate(&grads, |role| weight * matrix.scale(role, t));
    }
    Ok(())
}

/// Per-modality importance: the negated MIPD value, i.e. the mean JSD
/// response to permuting that modality. Each lies in `[0, ln 2]`.
pub fn importance_scores(
    g: &mut Graph,
    model: &MultimodalModel,
    latents: &[Var],
    clean_logits: Var,
    sigmas: &[Vec<usize>],
    counter: &mut CostCounter,
) -> Result<Vec<f64>> {
    (0..latents.len())
        .map(|m| {
            let l = mipd_loss(g, model, latents, clean_logits, m, sigmas, counter)?;
            Ok(-g.scalar(l))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrices_follow_strategy_table() {
        let c = StrategyMatrix::new(Strategy::Collaborative, 3);
        assert!(c.k.iter().flatten().all(|v| *v == 1.0));
        let i = StrategyMatrix::new(Strategy::Independent, 3);
        for (a, row) in i.k.iter().enumerate() {
            for (b, v) in row.iter().enumerate() {
                assert_eq!(*v, if a == b { 1.0 } else { 0.0 });
            }
        }
        let g = StrategyMatrix::new(Strategy::Greedy, 3);
        for (a, row) in g.k.iter().enumerate() {
            for (b, v) in row.iter().enumerate() {
                assert_eq!(*v, if a == b { 1.0 } else { -1.0 });
            }
        }
        assert_eq!(g.fusion_k, vec![1.0; 3]);
    }

    #[test]
    fn collaborative_plus_greedy_is_twice_diagonal() {
        let c = StrategyMatrix::new(Strategy::Collaborative, 2);
        let g = StrategyMatrix::new(Strategy::Greedy, 2);
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 2.0 } else { 0.0 };
                assert_eq!(c.k[i][j] + g.k[i][j], want);
            }
        }
    }

    #[test]
    fn subset_signs() {
        let subsets = vec![vec![0], vec![1], vec![0, 1]];
        let g = StrategyMatrix::for_subsets(Strategy::Greedy, 2, &subsets);
        assert_eq!(g.k, vec![vec![1.0, -1.0, 1.0], vec![-1.0, 1.0, 1.0]]);
        let singles = StrategyMatrix::for_subsets(Strategy::Greedy, 2, &subsets[..2]);
        assert_eq!(singles.k, StrategyMatrix::new(Strategy::Greedy, 2).k);
    }

    #[test]
    fn unknown_strategy_rejected() {
        assert!("selfish".parse::<Strategy>().is_err());
        assert_eq!("greedy".parse::<Strategy>().unwrap(), Strategy::Greedy);
    }

    #[test]
    fn missing_role_rejected() {
        let mut store = ParamStore::new();
        store.add("f", Role::Fusion, crate::autodiff::Tensor::scalar(1.0));
        let mut g = Graph::new();
        let x = g.variable(1, 1, vec![1.0]).unwrap();
        let err = route_mipd_gradients(&g, &[x, x], &mut store, &StrategyMatrix::new(Strategy::Greedy, 2), 1.0);
        assert!(err.is_err());
    }

    use crate::autodiff::Tensor;
    use crate::models::ModelSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (MultimodalModel, Tensor, Tensor) {
        let model = MultimodalModel::new(ModelSpec::toy(&[5, 3], 3), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let x1 = Tensor::matrix(6, 5, (0..30).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let x2 = Tensor::matrix(6, 3, (0..18).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        (model, x1, x2)
    }

    const SIGMAS: [[usize; 6]; 2] = [[3, 0, 5, 1, 2, 4], [1, 2, 0, 5, 4, 3]];

    fn sigmas() -> Vec<Vec<usize>> {
        SIGMAS.iter().map(|s| s.to_vec()).collect()
    }

    #[test]
    fn ignored_modality_has_zero_importance() {
        let (mut model, x1, x2) = setup(1);
        model.zero_fusion_block(1);
        let mut g = Graph::new();
        let mut c = CostCounter::new(2);
        let out = model.forward(&mut g, &[&x1, &x2], &mut c).unwrap();
        let imp = importance_scores(&mut g, &model, &out.latents, out.fused, &sigmas(), &mut c).unwrap();
        assert_eq!(imp[1], 0.0);
        assert!(imp[0] > 0.0 && imp[0] <= std::f64::consts::LN_2);
    }

    #[test]
    fn importance_is_negated_mipd_bitwise() {
        let (model, x1, x2) = setup(2);
        let mut g = Graph::new();
        let mut c = CostCounter::new(2);
        let out = model.forward(&mut g, &[&x1, &x2], &mut c).unwrap();
        let imp = importance_scores(&mut g, &model, &out.latents, out.fused, &sigmas(), &mut c).unwrap();
        for (m, v) in imp.iter().enumerate() {
            let l = mipd_loss(&mut g, &model, &out.latents, out.fused, m, &sigmas(), &mut c).unwrap();
            assert_eq!(v.to_bits(), (-g.scalar(l)).to_bits());
        }
    }

    fn routed(model: &MultimodalModel, x1: &Tensor, x2: &Tensor, strategy: Strategy) -> ParamStore {
        let mut store = model.store.clone();
        store.zero_grad();
        let mut g = Graph::new();
        let mut c = CostCounter::new(2);
        let out = model.forward(&mut g, &[x1, x2], &mut c).unwrap();
        let terms: Vec<Var> = (0..2)
            .map(|m| mipd_loss(&mut g, model, &out.latents, out.fused, m, &sigmas(), &mut c).unwrap())
            .collect();
        route_mipd_gradients(&g, &terms, &mut store, &StrategyMatrix::new(strategy, 2), 1.0).unwrap();
        store
    }

    #[test]
    fn greedy_routing_matches_explicit_objective() {
        let (model, x1, x2) = setup(3);
        let store = routed(&model, &x1, &x2, Strategy::Greedy);
        let mut g = Graph::new();
        let mut c = CostCounter::new(2);
        let out = model.forward(&mut g, &[&x1, &x2], &mut c).unwrap();
        let l1 = mipd_loss(&mut g, &model, &out.latents, out.fused, 0, &sigmas(), &mut c).unwrap();
        let l2 = mipd_loss(&mut g, &model, &out.latents, out.fused, 1, &sigmas(), &mut c).unwrap();
        let d12 = g.sub(l1, l2).unwrap();
        let d21 = g.sub(l2, l1).unwrap();
        let gr12 = g.backward(d12).unwrap();
        let gr21 = g.backward(d21).unwrap();
        for (m, grads) in [(0, &gr12), (1, &gr21)] {
            for id in model.encoder_params(m) {
                let want = grads.param(id).unwrap();
                let got = store.get(id).grad().unwrap();
                for (a, b) in got.iter().zip(want) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn collaborative_plus_greedy_gradients() {
        let (model, x1, x2) = setup(4);
        let c = routed(&model, &x1, &x2, Strategy::Collaborative);
        let gr = routed(&model, &x1, &x2, Strategy::Greedy);
        let i = routed(&model, &x1, &x2, Strategy::Independent);
        for id in model.encoder_params(0) {
            let (a, b, own) = (c.get(id).grad().unwrap(), gr.get(id).grad().unwrap(), i.get(id).grad().unwrap());
            for k in 0..a.len() {
                assert!((a[k] + b[k] - 2.0 * own[k]).abs() < 1e-10);
            }
        }
    }
}
