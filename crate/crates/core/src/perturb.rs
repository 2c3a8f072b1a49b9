//! Perturbations used to measure a modality's influence on the fused output,
//! and the forward-pass accounting that separates latent-space perturbations
//! (no encoder re-execution) from input-space ones.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::MultimodalModel;

/// Per-modality encoder passes and fusion passes, counted in samples.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostCounter {
    pub encoder_passes: Vec<u64>,
    pub fusion_passes: u64,
}

impl CostCounter {
    pub fn new(n_modalities: usize) -> Self {
        Self {
            encoder_passes: vec![0; n_modalities],
            fusion_passes: 0,
        }
    }

    pub fn record_encoder(&mut self, m: usize, samples: usize) {
        if self.encoder_passes.len() <= m {
            self.encoder_passes.resize(m + 1, 0);
        }
        self.encoder_passes[m] += samples as u64;
    }

    pub fn record_fusion(&mut self, samples: usize) {
        self.fusion_passes += samples as u64;
    }

    pub fn merge(&mut self, other: &CostCounter) {
        for (m, n) in other.encoder_passes.iter().enumerate() {
            self.record_encoder(m, 0);
            self.encoder_passes[m] += n;
        }
        self.fusion_passes += other.fusion_passes;
    }

    pub fn reset(&mut self) {
        self.encoder_passes.fill(0);
        self.fusion_passes = 0;
    }

    pub fn total_encoder_passes(&self) -> u64 {
        self.encoder_passes.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationKind {
    #[default]
    PermuteLatent,
    NoiseLatent,
    NoiseInput,
    ZeromaskInput,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 4] = [
        PerturbationKind::PermuteLatent,
        PerturbationKind::NoiseLatent,
        PerturbationKind::NoiseInput,
        PerturbationKind::ZeromaskInput,
    ];

    pub fn is_input_space(self) -> bool {
        matches!(self, PerturbationKind::NoiseInput | PerturbationKind::ZeromaskInput)
    }

    pub fn is_noise(self) -> bool {
        matches!(self, PerturbationKind::NoiseInput | PerturbationKind::NoiseLatent)
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PerturbationKind::PermuteLatent => "permute-latent",
            PerturbationKind::NoiseLatent => "noise-latent",
            PerturbationKind::NoiseInput => "noise-input",
            PerturbationKind::ZeromaskInput => "zeromask-input",
        })
    }
}

impl FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown perturbation kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    #[serde(default)]
    pub kind: PerturbationKind,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    /// Number of perturbation draws per batch.
    #[serde(default = "default_samples", alias = "n_perm")]
    pub n_samples: usize,
}

fn default_noise_std() -> f64 {
    0.5
}

fn default_samples() -> usize {
    1
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            kind: PerturbationKind::PermuteLatent,
            noise_std: default_noise_std(),
            n_samples: default_samples(),
        }
    }
}

impl Perturbation {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("perturbation.n_samples must be at least 1".into()));
        }
        if self.kind.is_noise() && !(self.noise_std > 0.0) {
            return Err(Error::Config("perturbation.noise_std must be positive for noise kinds".into()));
        }
        Ok(())
    }
}

/// `n` independent uniform permutations of `0..batch_size` (identity allowed).
pub fn sample_permutations<R: Rng + ?Sized>(batch_size: usize, n: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "within-batch permutation needs at least 2 rows, got {batch_size}"
        )));
    }
    Ok((0..n)
        .map(|_| {
            let mut p: Vec<usize> = (0..batch_size).collect();
            p.shuffle(rng);
            p
        })
        .collect())
}

pub fn invert_permutation(sigma: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; sigma.len()];
    for (i, &s) in sigma.iter().enumerate() {
        inv[s] = i;
    }
    inv
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelSplit {
    pub matching: Vec<usize>,
    pub nonmatching: Vec<usize>,
}

/// Splits rows by whether the permuted partner carries the same label.
pub fn label_match_split(sigma: &[usize], y: &[usize]) -> LabelSplit {
    let mut out = LabelSplit::default();
    for (i, &s) in sigma.iter().enumerate() {
        if y[i] == y[s] {
            out.matching.push(i);
        } else {
            out.nonmatching.push(i);
        }
    }
    out
}

/// Perturbed latents of `modality`, one per draw.
///
/// Latent-space kinds reuse `latents` without touching the encoders.
/// Input-space kinds rebuild the modality's input and run its encoder once per
/// draw, which the counter records.
#[allow(clippy::too_many_arguments)]
pub fn apply_perturbation<R: Rng + ?Sized>(
    cfg: &Perturbation,
    model: &MultimodalModel,
    g: &mut Graph,
    inputs: &[&Tensor],
    latents: &[Var],
    modality: usize,
    sigmas: &[Vec<usize>],
    rng: &mut R,
    counter: &mut crate::perturb::CostCounter,
) -> Result<Vec<Var>> {
    cfg.validate()?;
    let z = *latents.get(modality).ok_or_else(|| Error::Modality {
        modality,
        detail: "no latent for modality".into(),
    })?;
    let mut out = Vec::with_capacity(cfg.n_samples);
    match cfg.kind {
        PerturbationKind::PermuteLatent => {
            if sigmas.len() != cfg.n_samples {
                return Err(Error::Config(format!(
                    "expected {} permutations, got {}",
                    cfg.n_samples,
                    sigmas.len()
                )));
            }
            for s in sigmas {
                out.push(g.permute_rows(z, s)?);
            }
        }
        PerturbationKind::NoiseLatent => {
            let (r, c) = g.shape(z);
            let normal = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
            for _ in 0..cfg.n_samples {
                let noise = g.constant(r, c, (0..r * c).map(|_| normal.sample(rng)).collect())?;
                out.push(g.add(z, noise)?);
            }
        }
        PerturbationKind::NoiseInput | PerturbationKind::ZeromaskInput => {
            let x = inputs.get(modality).ok_or_else(|| Error::Modality {
                modality,
                detail: "no input for modality".into(),
            })?;
            let normal = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE))
                .map_err(|e| Error::Config(e.to_string()))?;
            for _ in 0..cfg.n_samples {
                let vals: Vec<f64> = match cfg.kind {
                    PerturbationKind::NoiseInput => x.values().iter().map(|v| v + normal.sample(rng)).collect(),
                    _ => vec![0.0; x.len()],
                };
                let xt = g.constant(x.rows(), x.cols(), vals)?;
                out.push(model.encode_var(g, modality, xt, counter)?);
            }
        }
    }
    Ok(out)
}
