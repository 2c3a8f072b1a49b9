//! Gradient identity for the two-player MIPD game on a small tanh/softmax
//! model, checked against reverse-mode autodiff.
//!
//! The analytic side is the aggregated gradient of `JSD_1 - JSD_2` with
//! respect to the first encoder's weights, where `JSD_m` compares the clean
//! prediction with the prediction after permuting modality `m`. Since each
//! MIPD loss is a negated JSD, autodiff of `L_MIPD1 - L_MIPD2` equals the
//! negated analytic expression.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{check_permutation, softmax_in_place, Graph, ParamId, ParamStore, Role, Tensor, Var};
use crate::error::{Error, Result};

use super::jsd;
use crate::game::{route_mipd_gradients, StrategyMatrix};

pub const EQUILIBRIUM_TOL: f64 = 1e-6;

/// `z_m = tanh(x_m W_m)`, `logits = z_1 A_1 + z_2 A_2 + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyGameModel {
    pub w1: Tensor,
    pub w2: Tensor,
    pub a1: Tensor,
    pub a2: Tensor,
    pub c: Tensor,
}

impl ToyGameModel {
    /// Gaussian weights with standard deviation `scale`.
    pub fn random(d1: usize, d2: usize, hidden: usize, classes: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).map_err(|e| Error::Config(e.to_string()))?;
        let mut draw = |r: usize, c: usize| Tensor::matrix(r, c, (0..r * c).map(|_| normal.sample(&mut rng)).collect());
        Ok(Self {
            w1: draw(d1, hidden)?,
            w2: draw(d2, hidden)?,
            a1: draw(hidden, classes)?,
            a2: draw(hidden, classes)?,
            c: draw(1, classes)?,
        })
    }

    pub fn classes(&self) -> usize {
        self.c.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    fn validate(&self) -> Result<()> {
        let h = self.hidden();
        let k = self.classes();
        let ok = self.w2.cols() == h
            && self.a1.rows() == h
            && self.a2.rows() == h
            && self.a1.cols() == k
            && self.a2.cols() == k
            && self.c.rows() == 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape {
                op: "toy_game_model",
                detail: "inconsistent weight shapes".into(),
            })
        }
    }

    fn latent(x: &[f64], w: &Tensor) -> Vec<f64> {
        (0..w.cols())
            .map(|b| x.iter().enumerate().map(|(a, xa)| xa * w.get(a, b)).sum::<f64>().tanh())
            .collect()
    }

    fn probs(&self, z1: &[f64], z2: &[f64]) -> Vec<f64> {
        let mut p: Vec<f64> = (0..self.classes())
            .map(|k| {
                self.c.get(0, k)
                    + z1.iter().enumerate().map(|(b, v)| v * self.a1.get(b, k)).sum::<f64>()
                    + z2.iter().enumerate().map(|(b, v)| v * self.a2.get(b, k)).sum::<f64>()
            })
            .collect();
        softmax_in_place(&mut p);
        p
    }

    /// `d log p_y / d W_1` for a prediction whose first latent came from `x1`.
    fn grad_log_p(&self, x1: &[f64], z1: &[f64], p: &[f64], y: usize) -> Vec<f64> {
        let h = self.hidden();
        let mut out = vec![0.0; x1.len() * h];
        for b in 0..h {
            let back: f64 = (0..p.len())
                .map(|k| self.a1.get(b, k) * (f64::from(u8::from(k == y)) - p[k]))
                .sum::<f64>()
                * (1.0 - z1[b] * z1[b]);
            for (a, xa) in x1.iter().enumerate() {
                out[a * h + b] = xa * back;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    /// Autodiff gradient of `L_MIPD1 - L_MIPD2` w.r.t. `W_1`, row-major.
    pub autodiff: Vec<f64>,
    /// Aggregated analytic gradient of `JSD_1 - JSD_2` w.r.t. `W_1`.
    pub analytic: Vec<f64>,
    /// Clean-prediction term with the cancelled `log M(y|x1)/M(y|x2)` factor.
    pub term_clean: Vec<f64>,
    /// Term from the prediction with modality 1 permuted.
    pub term_perm1: Vec<f64>,
    /// Term from the prediction with modality 2 permuted (already negated).
    pub term_perm2: Vec<f64>,
    pub max_abs_discrepancy: f64,
    pub passed: bool,
}

/// Compares autodiff with the aggregated analytic gradient for one batch.
/// `sigma1` permutes modality 1 and `sigma2` modality 2.
pub fn analytic_mipd_gradient_check(
    model: &ToyGameModel,
    x1: &Tensor,
    x2: &Tensor,
    sigma1: &[usize],
    sigma2: &[usize],
) -> Result<EquilibriumReport> {
    model.validate()?;
    let b = x1.rows();
    if x2.rows() != b || x1.cols() != model.w1.rows() || x2.cols() != model.w2.rows() {
        return Err(Error::Shape {
            op: "analytic_mipd_gradient_check",
            detail: "inputs do not match toy model".into(),
        });
    }
    check_permutation(sigma1, b)?;
    check_permutation(sigma2, b)?;

    let autodiff = autodiff_gradient(model, x1, x2, sigma1, sigma2)?;

    let n = model.w1.len();
    let mut term_clean = vec![0.0; n];
    let mut term_perm1 = vec![0.0; n];
    let mut term_perm2 = vec![0.0; n];
    let z1: Vec<Vec<f64>> = (0..b).map(|s| ToyGameModel::latent(x1.row(s), &model.w1)).collect();
    let z2: Vec<Vec<f64>> = (0..b).map(|s| ToyGameModel::latent(x2.row(s), &model.w2)).collect();
    let inv_b = 1.0 / b as f64;
    for s in 0..b {
        let p = model.probs(&z1[s], &z2[s]);
        let p1 = model.probs(&z1[sigma1[s]], &z2[s]);
        let p2 = model.probs(&z1[s], &z2[sigma2[s]]);
        for y in 0..model.classes() {
            let m_x2 = 0.5 * (p[y] + p1[y]);
            let m_x1 = 0.5 * (p[y] + p2[y]);
            let add = |acc: &mut [f64], w: f64, g: Vec<f64>| acc.iter_mut().zip(g).for_each(|(a, v)| *a += w * v);
            if p[y] > 0.0 {
                let w = 0.5 * p[y] * (m_x1 / m_x2).ln() * inv_b;
                add(&mut term_clean, w, model.grad_log_p(x1.row(s), &z1[s], &p, y));
            }
            if p1[y] > 0.0 {
                let w = 0.5 * p1[y] * ((p1[y] / m_x2).ln() + 1.0) * inv_b;
                add(&mut term_perm1, w, model.grad_log_p(x1.row(sigma1[s]), &z1[sigma1[s]], &p1, y));
            }
            if p2[y] > 0.0 {
                let w = -0.5 * p2[y] * ((p2[y] / m_x1).ln() + 1.0) * inv_b;
                add(&mut term_perm2, w, model.grad_log_p(x1.row(s), &z1[s], &p2, y));
            }
        }
    }
    let analytic: Vec<f64> = (0..n).map(|i| term_clean[i] + term_perm1[i] + term_perm2[i]).collect();
    let max_abs_discrepancy = autodiff
        .iter()
        .zip(&analytic)
        .map(|(a, b)| (a + b).abs())
        .fold(0.0, f64::max);
    Ok(EquilibriumReport {
        autodiff,
        analytic,
        term_clean,
        term_perm1,
        term_perm2,
        max_abs_discrepancy,
        passed: max_abs_discrepancy < EQUILIBRIUM_TOL,
    })
}

struct ToyIds {
    w1: ParamId,
    w2: ParamId,
    a1: ParamId,
    a2: ParamId,
    c: ParamId,
}

fn toy_store(model: &ToyGameModel) -> (ParamStore, ToyIds) {
    let mut store = ParamStore::new();
    let ids = ToyIds {
        w1: store.add("w1", Role::Encoder(0), model.w1.clone()),
        w2: store.add("w2", Role::Encoder(1), model.w2.clone()),
        a1: store.add("a1", Role::Fusion, model.a1.clone()),
        a2: store.add("a2", Role::Fusion, model.a2.clone()),
        c: store.add("c", Role::Fusion, model.c.clone()),
    };
    (store, ids)
}

fn toy_logits(g: &mut Graph, store: &ParamStore, ids: &ToyIds, z1: Var, z2: Var) -> Result<Var> {
    let a1 = g.param(store, ids.a1);
    let a2 = g.param(store, ids.a2);
    let c = g.param(store, ids.c);
    let l1 = g.matmul(z1, a1)?;
    let l2 = g.matmul(z2, a2)?;
    let s = g.add(l1, l2)?;
    g.add_row(s, c)
}

/// Autodiff gradients of `L_MIPD1 - L_MIPD2` for `(W_1, W_2, A_1, A_2, c)`.
pub fn autodiff_all(
    model: &ToyGameModel,
    x1: &Tensor,
    x2: &Tensor,
    sigma1: &[usize],
    sigma2: &[usize],
) -> Result<[Vec<f64>; 5]> {
    let (store, ids) = toy_store(model);
    let mut g = Graph::new();
    let xv1 = g.constant_tensor(x1);
    let xv2 = g.constant_tensor(x2);
    let w1 = g.param(&store, ids.w1);
    let w2 = g.param(&store, ids.w2);
    let h1 = g.matmul(xv1, w1)?;
    let z1 = g.tanh(h1);
    let h2 = g.matmul(xv2, w2)?;
    let z2 = g.tanh(h2);
    let clean = toy_logits(&mut g, &store, &ids, z1, z2)?;
    let z1p = g.permute_rows(z1, sigma1)?;
    let l1 = toy_logits(&mut g, &store, &ids, z1p, z2)?;
    let z2p = g.permute_rows(z2, sigma2)?;
    let l2 = toy_logits(&mut g, &store, &ids, z1, z2p)?;
    let p = g.softmax_rows(clean);
    let q1 = g.softmax_rows(l1);
    let q2 = g.softmax_rows(l2);
    let j1 = jsd(&mut g, p, q1)?;
    let j2 = jsd(&mut g, p, q2)?;
    // L_MIPD1 - L_MIPD2 = -j1 + j2
    let diff = g.sub(j2, j1)?;
    let grads = g.backward(diff)?;
    let get = |id: ParamId| -> Result<Vec<f64>> {
        grads
            .param(id)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::MissingGradient {
                name: store.name(id).to_string(),
            })
    };
    Ok([get(ids.w1)?, get(ids.w2)?, get(ids.a1)?, get(ids.a2)?, get(ids.c)?])
}

/// Gradient reaching `W_1` when the two MIPD terms are routed through
/// `matrix` (terms in modality order, fusion multipliers ignored for `W_1`).
/// Greedy routing reproduces autodiff of `L_MIPD1 - L_MIPD2`.
pub fn routed_encoder_gradient(
    model: &ToyGameModel,
    x1: &Tensor,
    x2: &Tensor,
    sigma1: &[usize],
    sigma2: &[usize],
    matrix: &StrategyMatrix,
) -> Result<Vec<f64>> {
    model.validate()?;
    check_permutation(sigma1, x1.rows())?;
    check_permutation(sigma2, x1.rows())?;
    let (mut store, ids) = toy_store(model);
    let mut g = Graph::new();
    let xv1 = g.constant_tensor(x1);
    let xv2 = g.constant_tensor(x2);
    let w1 = g.param(&store, ids.w1);
    let w2 = g.param(&store, ids.w2);
    let h1 = g.matmul(xv1, w1)?;
    let z1 = g.tanh(h1);
    let h2 = g.matmul(xv2, w2)?;
    let z2 = g.tanh(h2);
    let clean = toy_logits(&mut g, &store, &ids, z1, z2)?;
    let p = g.softmax_rows(clean);
    let z1p = g.permute_rows(z1, sigma1)?;
    let l1 = toy_logits(&mut g, &store, &ids, z1p, z2)?;
    let q1 = g.softmax_rows(l1);
    let z2p = g.permute_rows(z2, sigma2)?;
    let l2 = toy_logits(&mut g, &store, &ids, z1, z2p)?;
    let q2 = g.softmax_rows(l2);
    let j1 = jsd(&mut g, p, q1)?;
    let j2 = jsd(&mut g, p, q2)?;
    let m1 = g.scale(j1, -1.0);
    let m2 = g.scale(j2, -1.0);
    store.zero_grad();
    route_mipd_gradients(&g, &[m1, m2], &mut store, matrix, 1.0)?;
    Ok(store
        .get(ids.w1)
        .grad()
        .map_or_else(|| vec![0.0; model.w1.len()], <[f64]>::to_vec))
}

fn autodiff_gradient(
    model: &ToyGameModel,
    x1: &Tensor,
    x2: &Tensor,
    sigma1: &[usize],
    sigma2: &[usize],
) -> Result<Vec<f64>> {
    let [w1, ..] = autodiff_all(model, x1, x2, sigma1, sigma2)?;
    Ok(w1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturb::sample_permutations;

    fn inputs(b: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        Tensor::matrix(b, d, (0..b * d).map(|_| n.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn greedy_routing_reproduces_the_identity() {
        for seed in 0..5u64 {
            let m = ToyGameModel::random(3, 2, 4, 3, 0.8, seed).unwrap();
            let x1 = inputs(6, 3, 10 + seed);
            let x2 = inputs(6, 2, 20 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(30 + seed);
            let s = sample_permutations(6, 2, &mut rng).unwrap();
            let r = analytic_mipd_gradient_check(&m, &x1, &x2, &s[0], &s[1]).unwrap();
            let mut k = StrategyMatrix::new(crate::game::Strategy::Greedy, 2);
            let routed = routed_encoder_gradient(&m, &x1, &x2, &s[0], &s[1], &k).unwrap();
            let err = routed.iter().zip(&r.analytic).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
            assert!(err < EQUILIBRIUM_TOL, "seed {seed}: {err}");
            k.flip_negative();
            let flipped = routed_encoder_gradient(&m, &x1, &x2, &s[0], &s[1], &k).unwrap();
            let err = flipped.iter().zip(&r.analytic).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
            assert!(err > EQUILIBRIUM_TOL, "seed {seed}: flipped routing still agrees");
        }
    }

    #[test]
    fn random_instances_agree() {
        for seed in 0..10u64 {
            let b = 3 + (seed as usize % 6);
            let classes = 2 + (seed as usize % 3);
            let m = ToyGameModel::random(3, 2, 4, classes, 0.8, seed).unwrap();
            let x1 = inputs(b, 3, 100 + seed);
            let x2 = inputs(b, 2, 200 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let s = sample_permutations(b, 2, &mut rng).unwrap();
            let r = analytic_mipd_gradient_check(&m, &x1, &x2, &s[0], &s[1]).unwrap();
            assert!(r.passed, "seed {seed}: {}", r.max_abs_discrepancy);
            assert!(r.autodiff.iter().any(|v| v.abs() > 1e-6));
        }
    }

    #[test]
    fn identical_rows_give_zero_gradient() {
        let m = ToyGameModel::random(2, 2, 3, 3, 1.0, 4).unwrap();
        let x1 = Tensor::matrix(4, 2, [0.3, -0.7].repeat(4)).unwrap();
        let x2 = Tensor::matrix(4, 2, [1.1, 0.2].repeat(4)).unwrap();
        let r = analytic_mipd_gradient_check(&m, &x1, &x2, &[1, 2, 3, 0], &[3, 2, 1, 0]).unwrap();
        assert!(r.autodiff.iter().all(|v| v.abs() < 1e-12));
        assert!(r.analytic.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn swapping_modalities_flips_shared_gradient() {
        let m = ToyGameModel::random(2, 2, 3, 3, 0.9, 8).unwrap();
        let swapped = ToyGameModel {
            w1: m.w2.clone(),
            w2: m.w1.clone(),
            a1: m.a2.clone(),
            a2: m.a1.clone(),
            c: m.c.clone(),
        };
        let x1 = inputs(5, 2, 1);
        let x2 = inputs(5, 2, 2);
        let s1 = [2, 0, 1, 4, 3];
        let s2 = [1, 2, 3, 4, 0];
        let g = autodiff_all(&m, &x1, &x2, &s1, &s2).unwrap();
        let h = autodiff_all(&swapped, &x2, &x1, &s2, &s1).unwrap();
        for (a, b) in g[4].iter().zip(&h[4]) {
            assert!((a + b).abs() < 1e-12);
        }
        for (a, b) in g[0].iter().zip(&h[1]) {
            assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_permutation_rejected() {
        let m = ToyGameModel::random(2, 2, 2, 2, 1.0, 0).unwrap();
        let x = inputs(3, 2, 0);
        assert!(analytic_mipd_gradient_check(&m, &x, &x, &[0, 0, 1], &[0, 1, 2]).is_err());
    }
}
