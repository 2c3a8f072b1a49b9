//! Per-modality MLP encoders, the fusion network over concatenated latents,
//! linear unimodal heads and the reconstruction head used by the CEB term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Role, Tensor, Var};
use crate::error::{Error, Result};
use crate::perturb::CostCounter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub latent_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl EncoderSpec {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![64, 64],
            latent_dim: 32,
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoders: Vec<EncoderSpec>,
    pub fusion_hidden: Vec<usize>,
    pub recon_hidden: Vec<usize>,
    pub n_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    /// Default toy architecture for the given per-modality input widths.
    pub fn toy(input_dims: &[usize], n_classes: usize) -> Self {
        Self {
            encoders: input_dims.iter().map(|&d| EncoderSpec::new(d)).collect(),
            fusion_hidden: vec![64],
            recon_hidden: vec![32],
            n_classes,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoders.is_empty() {
            return Err(Error::Config("model needs at least one encoder".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be at least 2".into()));
        }
        for (m, e) in self.encoders.iter().enumerate() {
            if e.latent_dim == 0 || e.input_dim == 0 || e.hidden_dims.contains(&0) {
                return Err(Error::Modality {
                    modality: m,
                    detail: "encoder dimensions must be positive".into(),
                });
            }
        }
        if self.fusion_hidden.contains(&0) || self.recon_hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn total_latent(&self) -> usize {
        self.encoders.iter().map(|e| e.latent_dim).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
}

impl Mlp {
    fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        role: Role,
        dims: &[usize],
        activation: Activation,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let vals = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
                let w = store.add(
                    format!("{prefix}.l{i}.w"),
                    role,
                    Tensor::matrix(fan_in, fan_out, vals).expect("layer dims"),
                );
                let b = store.add(format!("{prefix}.l{i}.b"), role, Tensor::zeros(vec![1, fan_out]));
                Linear { w, b }
            })
            .collect();
        Self { layers, activation }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g.param(store, layer.w);
            let b = g.param(store, layer.b);
            let z = g.matmul(h, w)?;
            h = g.add_row(z, b)?;
            if i < last {
                h = match self.activation {
                    Activation::Relu => g.relu(h),
                    Activation::Tanh => g.tanh(h),
                };
            }
        }
        Ok(h)
    }
}

/// Encoders, fusion network, unimodal heads and reconstruction head sharing
/// one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalModel {
    pub spec: ModelSpec,
    pub store: ParamStore,
    encoders: Vec<Mlp>,
    fusion: Mlp,
    uni_heads: Vec<Mlp>,
    recon: Mlp,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub latents: Vec<Var>,
    pub fused: Var,
    pub unimodal: Vec<Var>,
}

impl MultimodalModel {
    /// Fan-in uniform weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero biases.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut encoders = Vec::new();
        for (m, e) in spec.encoders.iter().enumerate() {
            let mut dims = vec![e.input_dim];
            dims.extend(&e.hidden_dims);
            dims.push(e.latent_dim);
            encoders.push(Mlp::build(&mut store, &mut rng, &format!("enc{}", m + 1), Role::Encoder(m), &dims, e.activation));
        }
        let total = spec.total_latent();
        let mut dims = vec![total];
        dims.extend(&spec.fusion_hidden);
        dims.push(spec.n_classes);
        let fusion = Mlp::build(&mut store, &mut rng, "fusion", Role::Fusion, &dims, spec.activation);
        let uni_heads = spec
            .encoders
            .iter()
            .enumerate()
            .map(|(m, e)| {
                Mlp::build(
                    &mut store,
                    &mut rng,
                    &format!("uni{}", m + 1),
                    Role::UniHead(m),
                    &[e.latent_dim, spec.n_classes],
                    spec.activation,
                )
            })
            .collect();
        let mut dims = vec![spec.n_classes];
        dims.extend(&spec.recon_hidden);
        dims.push(total);
        let recon = Mlp::build(&mut store, &mut rng, "recon", Role::Recon, &dims, spec.activation);
        Ok(Self {
            spec,
            store,
            encoders,
            fusion,
            uni_heads,
            recon,
        })
    }

    pub fn n_modalities(&self) -> usize {
        self.encoders.len()
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    fn check_input(&self, m: usize, x: &Tensor, batch: Option<usize>) -> Result<()> {
        let want = self.spec.encoders[m].input_dim;
        if x.cols() != want {
            return Err(Error::Modality {
                modality: m,
                detail: format!("expected {want} input columns, got {}", x.cols()),
            });
        }
        if let Some(b) = batch {
            if x.rows() != b {
                return Err(Error::Modality {
                    modality: m,
                    detail: format!("batch size {} differs from {b}", x.rows()),
                });
            }
        }
        Ok(())
    }

    /// Runs encoder `m` on an input already on the graph.
    pub fn encode_var(&self, g: &mut Graph, m: usize, x: Var, counter: &mut CostCounter) -> Result<Var> {
        if m >= self.encoders.len() {
            return Err(Error::Modality {
                modality: m,
                detail: format!("model has {} modalities", self.encoders.len()),
            });
        }
        let (rows, cols) = g.shape(x);
        if cols != self.spec.encoders[m].input_dim {
            return Err(Error::Modality {
                modality: m,
                detail: format!("expected {} input columns, got {cols}", self.spec.encoders[m].input_dim),
            });
        }
        counter.record_encoder(m, rows);
        self.encoders[m].forward(g, &self.store, x)
    }

    pub fn encode(&self, g: &mut Graph, m: usize, x: &Tensor, counter: &mut CostCounter) -> Result<Var> {
        if m < self.encoders.len() {
            self.check_input(m, x, None)?;
        }
        let xv = g.constant_tensor(x);
        self.encode_var(g, m, xv, counter)
    }

    /// Full forward pass: every encoder once, one fusion pass, every unimodal head.
    pub fn forward(&self, g: &mut Graph, inputs: &[&Tensor], counter: &mut CostCounter) -> Result<ForwardOutput> {
        if inputs.len() != self.encoders.len() {
            return Err(Error::Config(format!(
                "model has {} modalities, batch has {}",
                self.encoders.len(),
                inputs.len()
            )));
        }
        let b = inputs[0].rows();
        for (m, x) in inputs.iter().enumerate() {
            self.check_input(m, x, Some(b))?;
        }
        let latents = inputs
            .iter()
            .enumerate()
            .map(|(m, x)| self.encode(g, m, x, counter))
            .collect::<Result<Vec<_>>>()?;
        let fused = self.fused_forward_from_latents(g, &latents, counter)?;
        let unimodal = latents
            .iter()
            .enumerate()
            .map(|(m, z)| self.uni_head(g, m, *z))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardOutput { latents, fused, unimodal })
    }

    /// Fusion network over already-computed latents. Encoders are not run.
    pub fn fused_forward_from_latents(&self, g: &mut Graph, latents: &[Var], counter: &mut CostCounter) -> Result<Var> {
        if latents.len() != self.encoders.len() {
            return Err(Error::Config(format!(
                "fusion expects {} latents, got {}",
                self.encoders.len(),
                latents.len()
            )));
        }
        let b = g.shape(latents[0]).0;
        for (m, z) in latents.iter().enumerate() {
            let (r, c) = g.shape(*z);
            let want = self.spec.encoders[m].latent_dim;
            if c != want || r != b {
                return Err(Error::Modality {
                    modality: m,
                    detail: format!("latent is {r}x{c}, expected {b}x{want}"),
                });
            }
        }
        let z = g.concat_cols(latents)?;
        counter.record_fusion(b);
        self.fusion.forward(g, &self.store, z)
    }

    pub fn uni_head(&self, g: &mut Graph, m: usize, z: Var) -> Result<Var> {
        let head = self.uni_heads.get(m).ok_or_else(|| Error::Modality {
            modality: m,
            detail: "no such unimodal head".into(),
        })?;
        head.forward(g, &self.store, z)
    }

    /// Encoder `m` followed by unimodal head `m`.
    pub fn unimodal_model_forward(&self, g: &mut Graph, m: usize, x: &Tensor, counter: &mut CostCounter) -> Result<Var> {
        let z = self.encode(g, m, x, counter)?;
        self.uni_head(g, m, z)
    }

    /// Reconstruction head applied to class probabilities.
    pub fn recon_forward(&self, g: &mut Graph, probs: Var) -> Result<Var> {
        let (_, c) = g.shape(probs);
        if c != self.spec.n_classes {
            return Err(Error::Shape {
                op: "recon_forward",
                detail: format!("expected {} probability columns, got {c}", self.spec.n_classes),
            });
        }
        self.recon.forward(g, &self.store, probs)
    }

    /// Column offsets of each modality's block inside the concatenated latent.
    pub fn latent_offsets(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.spec
            .encoders
            .iter()
            .map(|e| {
                let r = (off, e.latent_dim);
                off += e.latent_dim;
                r
            })
            .collect()
    }

    /// Zeroes the first-layer fusion weights that read modality `m`'s latent.
    pub fn zero_fusion_block(&mut self, m: usize) {
        let (start, len) = self.latent_offsets()[m];
        let w = self.fusion.layers[0].w;
        let t = self.store.get_mut(w);
        let cols = t.cols();
        for r in start..start + len {
            t.values_mut()[r * cols..(r + 1) * cols].fill(0.0);
        }
    }

    pub fn fusion_params(&self) -> Vec<ParamId> {
        self.fusion.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    pub fn encoder_params(&self, m: usize) -> Vec<ParamId> {
        self.encoders[m].layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> MultimodalModel {
        MultimodalModel::new(ModelSpec::toy(&[6, 4], 3), 7).unwrap()
    }

    fn inputs(b: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1 = Tensor::matrix(b, 6, (0..b * 6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let x2 = Tensor::matrix(b, 4, (0..b * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        (x1, x2)
    }

    #[test]
    fn zero_model_is_uniform() {
        let mut model = toy();
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            model.store.get_mut(id).values_mut().fill(0.0);
        }
        let (x1, x2) = inputs(3, 1);
        let mut g = Graph::new();
        let mut c = CostCounter::new(2);
        let out = model.forward(&mut g, &[&x1, &x2], &mut c).unwrap();
        assert!(g.value(out.fused).iter().all(|v| *v == 0.0));
        let p = g.softmax_rows(out.fused);
        assert!(g.value(p).iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let u = model.unimodal_model_forward(&mut g, 1, &x2, &mut c).unwrap();
        let pu = g.softmax_rows(u);
        assert!(g.value(pu).iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn rows_independent_of_batch() {
        let model = toy();
        let (x1, x2) = inputs(4, 2);
        let x1a = Tensor::matrix(1, 6, x1.row(0).to_vec()).unwrap();
        let x2a = Tensor::matrix(1, 4, x2.row(0).to_vec()).unwrap();
        let mut g = Graph::new();
        let mut c = CostCounter::new(2);
        let big = model.forward(&mut g, &[&x1, &x2], &mut c).unwrap();
        let one = model.forward(&mut g, &[&x1a, &x2a], &mut c).unwrap();
        assert_eq!(&g.value(big.fused)[..3], g.value(one.fused));
    }

    #[test]
    fn fused_from_latents_matches_forward_without_encoder_cost() {
        let model = toy();
        let (x1, x2) = inputs(5, 3);
        let mut g = Graph::new();
        let mut c = CostCounter::new(2);
        let out = model.forward(&mut g, &[&x1, &x2], &mut c).unwrap();
        let before = c.clone();
        let again = model.fused_forward_from_latents(&mut g, &out.latents, &mut c).unwrap();
        assert_eq!(g.value(out.fused), g.value(again));
        assert_eq!(c.encoder_passes, before.encoder_passes);
        assert_eq!(c.fusion_passes, before.fusion_passes + 5);

        let z1p = g.permute_rows(out.latents[0], &[1, 2, 3, 4, 0]).unwrap();
        let perm = model.fused_forward_from_latents(&mut g, &[z1p, out.latents[1]], &mut c).unwrap();
        assert_ne!(g.value(perm), g.value(out.fused));
    }

    #[test]
    fn unimodal_is_head_after_encoder() {
        let model = toy();
        let (_, x2) = inputs(3, 4);
        let mut g = Graph::new();
        let mut c = CostCounter::new(2);
        let direct = model.unimodal_model_forward(&mut g, 1, &x2, &mut c).unwrap();
        let z = model.encode(&mut g, 1, &x2, &mut c).unwrap();
        let manual = model.uni_head(&mut g, 1, z).unwrap();
        assert_eq!(g.value(direct), g.value(manual));
        assert!(model.unimodal_model_forward(&mut g, 2, &x2, &mut c).is_err());
    }

    #[test]
    fn dim_mismatch_names_modality() {
        let model = toy();
        let (x1, _) = inputs(3, 5);
        let mut g = Graph::new();
        let mut c = CostCounter::new(2);
        match model.forward(&mut g, &[&x1, &x1], &mut c) {
            Err(Error::Modality { modality, .. }) => assert_eq!(modality, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dims_wired_per_invariants() {
        let model = toy();
        let (x1, x2) = inputs(2, 6);
        let mut g = Graph::new();
        let mut c = CostCounter::new(2);
        let out = model.forward(&mut g, &[&x1, &x2], &mut c).unwrap();
        assert_eq!(g.shape(out.latents[0]), (2, 32));
        assert_eq!(g.shape(out.fused), (2, 3));
        let p = g.softmax_rows(out.fused);
        let r = model.recon_forward(&mut g, p).unwrap();
        assert_eq!(g.shape(r), (2, 64));
    }

    #[test]
    fn seeded_logits_regression() {
        let model = toy();
        let (x1, x2) = inputs(2, 11);
        let mut g = Graph::new();
        let mut c = CostCounter::new(2);
        let out = model.forward(&mut g, &[&x1, &x2], &mut c).unwrap();
        let got = g.value(out.fused).to_vec();
        let u = model.unimodal_model_forward(&mut g, 0, &x1, &mut c).unwrap();
        let got_uni = g.value(u).to_vec();
        let want: [f64; 6] = GOLDEN_FUSED;
        let want_uni: [f64; 6] = GOLDEN_UNI;
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{got:?}");
        }
        for (a, b) in got_uni.iter().zip(want_uni) {
            assert!((a - b).abs() < 1e-12, "{got_uni:?}");
        }
    }

    const GOLDEN_FUSED: [f64; 6] = [
        0.008098683550808184,
        -0.005937916616659551,
        0.027873062831333076,
        -0.00158858257165963,
        -0.005413098897563041,
        0.021928545890808226,
    ];
    const GOLDEN_UNI: [f64; 6] = [
        -0.0062271058241618665,
        -0.030571156776830265,
        -0.029485051855813026,
        0.0005107346034809457,
        0.01276806572636093,
        -0.005828162273308786,
    ];
}
