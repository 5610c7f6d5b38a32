//! Location-conditioned modulation of intermediate image features.
//!
//! A location trunk (`2 -> 128 -> 256`, ReLU) produces a geo embedding; a
//! linear projection per modulated layer reshapes it to that layer's width,
//! giving `β` and, for the multiplicative variants, `γ` from a second trunk.
//! The six variants differ in how `γ`, `β` and the layer's features combine.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo_fusion::geo_matrix;
use crate::geodesy::NormalizedGeo;
use crate::micronet::{
    epoch_batches, fresh_stamp, gather_rows, logistic, softmax_xent_batch, Activation, DenseLayer,
    ForwardCache, Gradients, LayerGrads, Network, Optimizer, OptimizerConfig, Parameterized,
    Tensor, TrainOutcome,
};

/// Widths of the location trunk.
pub const TRUNK_WIDTHS: [usize; 2] = [128, 256];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModulationVariant {
    /// `R(γ·F + β)` on the pre-activation.
    Film,
    /// `R(γ)·R(F) + R(β)`
    ReluGammaAdd,
    /// `S(γ)·R(F) + R(β)`
    SigmoidGammaAdd,
    /// `S(γ)·R(F)`
    SigmoidGammaOnly,
    /// `R(F) + R(β)`
    AddReluBeta,
    /// `R(F) + β`
    AddRawBeta,
}

impl ModulationVariant {
    pub const ALL: [ModulationVariant; 6] = [
        ModulationVariant::Film,
        ModulationVariant::ReluGammaAdd,
        ModulationVariant::SigmoidGammaAdd,
        ModulationVariant::SigmoidGammaOnly,
        ModulationVariant::AddReluBeta,
        ModulationVariant::AddRawBeta,
    ];

    pub fn uses_gamma(self) -> bool {
        !matches!(
            self,
            ModulationVariant::AddReluBeta | ModulationVariant::AddRawBeta
        )
    }

    pub fn uses_beta(self) -> bool {
        self != ModulationVariant::SigmoidGammaOnly
    }

    /// Whether zero-initialised projections reproduce the base network.
    /// The sigmoid variants start at `S(0) = 0.5` instead.
    pub fn identity_at_init(self) -> bool {
        !matches!(
            self,
            ModulationVariant::SigmoidGammaAdd | ModulationVariant::SigmoidGammaOnly
        )
    }

    /// Initial `γ` produced by [`ModulatedNet::beta_zero_init`].
    fn gamma_init(self) -> f64 {
        match self {
            ModulationVariant::Film | ModulationVariant::ReluGammaAdd => 1.0,
            _ => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModulationVariant::Film => "film",
            ModulationVariant::ReluGammaAdd => "relu_gamma_add",
            ModulationVariant::SigmoidGammaAdd => "sigmoid_gamma_add",
            ModulationVariant::SigmoidGammaOnly => "sigmoid_gamma_only",
            ModulationVariant::AddReluBeta => "add_relu_beta",
            ModulationVariant::AddRawBeta => "add_raw_beta",
        }
    }

    pub fn formula(self) -> &'static str {
        match self {
            ModulationVariant::Film => "R(γ·F + β)",
            ModulationVariant::ReluGammaAdd => "R(γ)·R(F) + R(β)",
            ModulationVariant::SigmoidGammaAdd => "S(γ)·R(F) + R(β)",
            ModulationVariant::SigmoidGammaOnly => "S(γ)·R(F)",
            ModulationVariant::AddReluBeta => "R(F) + R(β)",
            ModulationVariant::AddRawBeta => "R(F) + β",
        }
    }

    fn forward_one(self, pre: f64, post: f64, g: f64, b: f64) -> f64 {
        use ModulationVariant::*;
        match self {
            Film => (g * pre + b).max(0.0),
            ReluGammaAdd => g.max(0.0) * post + b.max(0.0),
            SigmoidGammaAdd => logistic(g) * post + b.max(0.0),
            SigmoidGammaOnly => logistic(g) * post,
            AddReluBeta => post + b.max(0.0),
            AddRawBeta => post + b,
        }
    }

    /// Returns `(d/dF_pre, d/dγ, d/dβ)` for upstream gradient `up`.
    ///
    /// The base ReLU uses the zero subgradient at 0; ReLUs applied to `γ` and
    /// `β` use 1 at 0 so zero-initialised projections still receive gradient.
    fn backward_one(self, pre: f64, post: f64, g: f64, b: f64, up: f64) -> (f64, f64, f64) {
        use ModulationVariant::*;
        let base_gate = if pre > 0.0 { 1.0 } else { 0.0 };
        let mod_gate = |v: f64| if v >= 0.0 { 1.0 } else { 0.0 };
        match self {
            Film => {
                let z = g * pre + b;
                let dz = if z > 0.0 { up } else { 0.0 };
                (dz * g, dz * pre, dz)
            }
            ReluGammaAdd => (
                up * g.max(0.0) * base_gate,
                up * post * mod_gate(g),
                up * mod_gate(b),
            ),
            SigmoidGammaAdd => {
                let s = logistic(g);
                (
                    up * s * base_gate,
                    up * post * s * (1.0 - s),
                    up * mod_gate(b),
                )
            }
            SigmoidGammaOnly => {
                let s = logistic(g);
                (up * s * base_gate, up * post * s * (1.0 - s), 0.0)
            }
            AddReluBeta => (up * base_gate, 0.0, up * mod_gate(b)),
            AddRawBeta => (up * base_gate, 0.0, up),
        }
    }
}

impl fmt::Display for ModulationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModulationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModulationVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown modulation variant `{s}`")))
    }
}

/// Applies one variant element-wise. `f_post` must equal `R(f_pre)`.
pub fn apply_variant(
    f_pre: &[f64],
    f_post: &[f64],
    gamma: Option<&[f64]>,
    beta: Option<&[f64]>,
    variant: ModulationVariant,
) -> Result<Vec<f64>> {
    let n = f_pre.len();
    let check = |name: &str, v: Option<&[f64]>, needed: bool| -> Result<()> {
        match (v, needed) {
            (Some(v), _) if v.len() != n => Err(Error::ShapeMismatch(format!(
                "{name} has {} values, features have {n}",
                v.len()
            ))),
            (None, true) => Err(Error::InvalidArgument(format!("{variant} needs {name}"))),
            _ => Ok(()),
        }
    };
    if f_post.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "pre-activation has {n} values, post-activation {}",
            f_post.len()
        )));
    }
    check("gamma", gamma, variant.uses_gamma())?;
    check("beta", beta, variant.uses_beta())?;
    Ok((0..n)
        .map(|i| {
            let g = gamma.map_or(0.0, |v| v[i]);
            let b = beta.map_or(0.0, |v| v[i]);
            variant.forward_one(f_pre[i], f_post[i], g, b)
        })
        .collect())
}

/// Base network whose hidden features are modulated by location.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModulatedNet {
    variant: ModulationVariant,
    base: Network,
    layer_mask: Vec<bool>,
    trunk_beta: Option<Network>,
    trunk_gamma: Option<Network>,
    proj_beta: Vec<Option<DenseLayer>>,
    proj_gamma: Vec<Option<DenseLayer>>,
    #[serde(skip, default = "fresh_stamp")]
    stamp: u64,
}

impl PartialEq for ModulatedNet {
    fn eq(&self, other: &Self) -> bool {
        self.variant == other.variant
            && self.base == other.base
            && self.layer_mask == other.layer_mask
            && self.trunk_beta == other.trunk_beta
            && self.trunk_gamma == other.trunk_gamma
            && self.proj_beta == other.proj_beta
            && self.proj_gamma == other.proj_gamma
    }
}

/// Modulate the upper half of the hidden layers.
pub fn default_layer_mask(hidden_layers: usize) -> Vec<bool> {
    (0..hidden_layers).map(|i| i >= hidden_layers / 2).collect()
}

#[derive(Debug, Clone)]
pub struct ModulatedCache {
    stamp: u64,
    trunk_beta: Option<(Tensor, ForwardCache)>,
    trunk_gamma: Option<(Tensor, ForwardCache)>,
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
    post: Vec<Tensor>,
    gammas: Vec<Option<Tensor>>,
    betas: Vec<Option<Tensor>>,
}

impl ModulatedCache {
    /// Smallest distance of any ReLU argument in the pass from its kink.
    /// Finite differences are only meaningful when this exceeds the step.
    pub fn kink_margin(&self) -> f64 {
        let min_abs = |m: f64, t: &Tensor| t.data().iter().fold(m, |m, v| m.min(v.abs()));
        let mut m = f64::INFINITY;
        for t in self.pre.iter().take(self.pre.len() - 1) {
            m = min_abs(m, t);
        }
        for (_, tc) in self.trunk_beta.iter().chain(self.trunk_gamma.iter()) {
            let mut i = 0;
            while let Some(t) = tc.pre_activation(i) {
                m = min_abs(m, t);
                i += 1;
            }
        }
        for i in 0..self.gammas.len() {
            for t in self.gammas[i].iter().chain(self.betas[i].iter()) {
                m = min_abs(m, t);
            }
            if let (Some(g), Some(b)) = (&self.gammas[i], &self.betas[i]) {
                // film's inner kink
                for k in 0..g.len() {
                    m = m.min((g.data()[k] * self.pre[i].data()[k] + b.data()[k]).abs());
                }
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModulatedGrads {
    pub base: Gradients,
    pub trunk_beta: Option<Gradients>,
    pub trunk_gamma: Option<Gradients>,
    pub proj_beta: Vec<Option<LayerGrads>>,
    pub proj_gamma: Vec<Option<LayerGrads>>,
}

impl ModulatedNet {
    /// Wraps `base` (ReLU hidden layers, linear output) with fresh location
    /// trunks and identity-initialised projections.
    pub fn new(
        base: Network,
        variant: ModulationVariant,
        layer_mask: Option<Vec<bool>>,
        seed: u64,
    ) -> Result<Self> {
        Self::with_trunk(base, variant, layer_mask, &TRUNK_WIDTHS, seed)
    }

    /// Like [`ModulatedNet::new`] with custom location-trunk widths.
    pub fn with_trunk(
        base: Network,
        variant: ModulationVariant,
        layer_mask: Option<Vec<bool>>,
        trunk_widths: &[usize],
        seed: u64,
    ) -> Result<Self> {
        base.validate()?;
        if trunk_widths.is_empty() {
            return Err(Error::Config(
                "location trunk needs at least one layer".into(),
            ));
        }
        let hidden = base.layers().len() - 1;
        if hidden == 0 {
            return Err(Error::InvalidArgument(
                "base network has no hidden layer to modulate".into(),
            ));
        }
        let mask = layer_mask.unwrap_or_else(|| default_layer_mask(hidden));
        if mask.len() != hidden {
            return Err(Error::Config(format!(
                "layer_mask has {} entries for {hidden} hidden layers",
                mask.len()
            )));
        }
        for (i, (layer, &m)) in base.layers().iter().zip(&mask).enumerate() {
            if m && layer.activation() != Activation::Relu {
                return Err(Error::Config(format!("modulated layer {i} must use relu")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes: Vec<usize> = std::iter::once(2)
            .chain(trunk_widths.iter().copied())
            .collect();
        let trunk =
            |rng: &mut ChaCha8Rng| Network::mlp(&sizes, Activation::Relu, Activation::Relu, rng);
        let trunk_beta = if variant.uses_beta() {
            Some(trunk(&mut rng)?)
        } else {
            None
        };
        let trunk_gamma = if variant.uses_gamma() {
            Some(trunk(&mut rng)?)
        } else {
            None
        };
        let emb = *trunk_widths.last().unwrap();
        let projections = |on: bool| -> Vec<Option<DenseLayer>> {
            base.layers()[..hidden]
                .iter()
                .zip(&mask)
                .map(|(l, &m)| {
                    (on && m).then(|| DenseLayer::zeros(emb, l.outputs(), Activation::Identity))
                })
                .collect()
        };
        let mut net = Self {
            variant,
            proj_beta: projections(variant.uses_beta()),
            proj_gamma: projections(variant.uses_gamma()),
            base,
            layer_mask: mask,
            trunk_beta,
            trunk_gamma,
            stamp: fresh_stamp(),
        };
        net.beta_zero_init();
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        let hidden = self.base.layers().len() - 1;
        let bad = |m: &str| Err(Error::Data(format!("modulated network: {m}")));
        if self.layer_mask.len() != hidden
            || self.proj_beta.len() != hidden
            || self.proj_gamma.len() != hidden
        {
            return bad("mask or projection count does not match hidden layers");
        }
        if self.trunk_beta.is_some() != self.variant.uses_beta()
            || self.trunk_gamma.is_some() != self.variant.uses_gamma()
        {
            return bad("trunks do not match the variant");
        }
        for i in 0..hidden {
            let width = self.base.layers()[i].outputs();
            for (proj, used) in [
                (&self.proj_beta[i], self.variant.uses_beta()),
                (&self.proj_gamma[i], self.variant.uses_gamma()),
            ] {
                match proj {
                    Some(p) if self.layer_mask[i] && used => {
                        p.validate()?;
                        if p.inputs() != self.embedding_dim() || p.outputs() != width {
                            return bad("projection shape");
                        }
                    }
                    None if !(self.layer_mask[i] && used) => {}
                    _ => return bad("projections must exist exactly for masked layers"),
                }
            }
        }
        Ok(())
    }

    pub fn variant(&self) -> ModulationVariant {
        self.variant
    }

    pub fn base(&self) -> &Network {
        &self.base
    }

    pub fn layer_mask(&self) -> &[bool] {
        &self.layer_mask
    }

    pub fn classes(&self) -> usize {
        self.base.output_dim()
    }

    /// Width of the location embedding fed to the projections.
    pub fn embedding_dim(&self) -> usize {
        self.trunk_beta
            .as_ref()
            .or(self.trunk_gamma.as_ref())
            .map_or(0, Network::output_dim)
    }

    pub fn has_gamma_trunk(&self) -> bool {
        self.trunk_gamma.is_some()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Zeroes every `β` projection and sets `γ` projections to emit the
    /// variant's initial value (1 for multiplicative ReLU/FiLM, 0 before a sigmoid).
    pub fn beta_zero_init(&mut self) {
        self.stamp = fresh_stamp();
        let g0 = self.variant.gamma_init();
        for p in self.proj_beta.iter_mut().flatten() {
            *p = DenseLayer::zeros(p.inputs(), p.outputs(), Activation::Identity);
        }
        for p in self.proj_gamma.iter_mut().flatten() {
            let mut z = DenseLayer::zeros(p.inputs(), p.outputs(), Activation::Identity);
            z.buffers_mut().1.fill(g0);
            *p = z;
        }
    }

    /// Replaces projections with random Glorot weights and biases.
    pub fn randomize_projections(&mut self, seed: u64) {
        self.stamp = fresh_stamp();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self
            .proj_beta
            .iter_mut()
            .chain(self.proj_gamma.iter_mut())
            .flatten()
        {
            let mut layer =
                DenseLayer::glorot(p.inputs(), p.outputs(), Activation::Identity, &mut rng);
            for b in layer.buffers_mut().1 {
                *b = rng.random_range(-0.5..0.5);
            }
            *p = layer;
        }
    }

    pub fn forward(&self, features: &Tensor, geos: &Tensor) -> Result<(Tensor, ModulatedCache)> {
        if features.rows() != geos.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows vs {} locations",
                features.rows(),
                geos.rows()
            )));
        }
        let trunk_beta = self
            .trunk_beta
            .as_ref()
            .map(|t| t.forward(geos))
            .transpose()?;
        let trunk_gamma = self
            .trunk_gamma
            .as_ref()
            .map(|t| t.forward(geos))
            .transpose()?;
        let layers = self.base.layers();
        let hidden = layers.len() - 1;
        let mut cache = ModulatedCache {
            stamp: self.stamp,
            trunk_beta: None,
            trunk_gamma: None,
            inputs: Vec::with_capacity(hidden + 1),
            pre: Vec::with_capacity(hidden + 1),
            post: Vec::with_capacity(hidden + 1),
            gammas: Vec::with_capacity(hidden),
            betas: Vec::with_capacity(hidden),
        };
        let mut x = features.clone();
        for i in 0..hidden {
            let layer = &layers[i];
            let pre = layer.linear(&x)?;
            let relu = layer.activate(&pre);
            let beta = match (&self.proj_beta[i], &trunk_beta) {
                (Some(p), Some((emb, _))) => Some(p.linear(emb)?),
                _ => None,
            };
            let gamma = match (&self.proj_gamma[i], &trunk_gamma) {
                (Some(p), Some((emb, _))) => Some(p.linear(emb)?),
                _ => None,
            };
            let out = if self.layer_mask[i] {
                let mut out = Tensor::zeros(pre.shape().to_vec());
                for (k, o) in out.data_mut().iter_mut().enumerate() {
                    let g = gamma.as_ref().map_or(0.0, |t| t.data()[k]);
                    let b = beta.as_ref().map_or(0.0, |t| t.data()[k]);
                    *o = self
                        .variant
                        .forward_one(pre.data()[k], relu.data()[k], g, b);
                }
                out
            } else {
                relu.clone()
            };
            cache.inputs.push(x);
            cache.pre.push(pre);
            cache.post.push(relu);
            cache.gammas.push(gamma);
            cache.betas.push(beta);
            x = out;
        }
        let last = &layers[hidden];
        let pre = last.linear(&x)?;
        let logits = last.activate(&pre);
        cache.inputs.push(x);
        cache.pre.push(pre);
        cache.post.push(logits.clone());
        cache.trunk_beta = trunk_beta;
        cache.trunk_gamma = trunk_gamma;
        logits.ensure_finite("modulated logits")?;
        Ok((logits, cache))
    }

    pub fn predict(&self, features: &Tensor, geos: &[NormalizedGeo]) -> Result<Tensor> {
        Ok(self.forward(features, &geo_matrix(geos))?.0)
    }

    pub fn backward(&self, cache: &ModulatedCache, grad_logits: &Tensor) -> Result<ModulatedGrads> {
        if cache.stamp != self.stamp {
            return Err(Error::StaleCache);
        }
        let layers = self.base.layers();
        let hidden = layers.len() - 1;
        let last = &layers[hidden];
        if cache.post[hidden].shape() != grad_logits.shape() {
            return Err(Error::ShapeMismatch("logit gradient shape".into()));
        }
        let mut base_grads: Vec<LayerGrads> = Vec::with_capacity(hidden + 1);
        let dpre = last.activation_backward(&cache.pre[hidden], &cache.post[hidden], grad_logits);
        let (g, mut upstream) = last.linear_backward(&cache.inputs[hidden], &dpre);
        base_grads.push(g);

        let batch = grad_logits.rows();
        let emb = self.embedding_dim();
        let mut d_emb_beta = Tensor::zeros(vec![batch, emb]);
        let mut d_emb_gamma = Tensor::zeros(vec![batch, emb]);
        let mut proj_beta_grads: Vec<Option<LayerGrads>> = vec![None; hidden];
        let mut proj_gamma_grads: Vec<Option<LayerGrads>> = vec![None; hidden];

        for i in (0..hidden).rev() {
            let layer = &layers[i];
            let (pre, post) = (&cache.pre[i], &cache.post[i]);
            let dpre = if self.layer_mask[i] {
                let n = pre.len();
                let mut dpre = Tensor::zeros(pre.shape().to_vec());
                let mut dgamma = Tensor::zeros(pre.shape().to_vec());
                let mut dbeta = Tensor::zeros(pre.shape().to_vec());
                for k in 0..n {
                    let g = cache.gammas[i].as_ref().map_or(0.0, |t| t.data()[k]);
                    let b = cache.betas[i].as_ref().map_or(0.0, |t| t.data()[k]);
                    let (df, dg, db) = self.variant.backward_one(
                        pre.data()[k],
                        post.data()[k],
                        g,
                        b,
                        upstream.data()[k],
                    );
                    dpre.data_mut()[k] = df;
                    dgamma.data_mut()[k] = dg;
                    dbeta.data_mut()[k] = db;
                }
                if let (Some(p), Some((emb_out, _))) = (&self.proj_beta[i], &cache.trunk_beta) {
                    let (pg, dx) = p.linear_backward(emb_out, &dbeta);
                    proj_beta_grads[i] = Some(pg);
                    crate::micronet::axpy(1.0, dx.data(), d_emb_beta.data_mut());
                }
                if let (Some(p), Some((emb_out, _))) = (&self.proj_gamma[i], &cache.trunk_gamma) {
                    let (pg, dx) = p.linear_backward(emb_out, &dgamma);
                    proj_gamma_grads[i] = Some(pg);
                    crate::micronet::axpy(1.0, dx.data(), d_emb_gamma.data_mut());
                }
                dpre
            } else {
                layer.activation_backward(pre, post, &upstream)
            };
            let (g, dx) = layer.linear_backward(&cache.inputs[i], &dpre);
            base_grads.push(g);
            upstream = dx;
        }
        base_grads.reverse();

        let trunk_beta = match (&self.trunk_beta, &cache.trunk_beta) {
            (Some(t), Some((_, c))) => Some(t.backward(c, &d_emb_beta)?.0),
            _ => None,
        };
        let trunk_gamma = match (&self.trunk_gamma, &cache.trunk_gamma) {
            (Some(t), Some((_, c))) => Some(t.backward(c, &d_emb_gamma)?.0),
            _ => None,
        };
        Ok(ModulatedGrads {
            base: Gradients { layers: base_grads },
            trunk_beta,
            trunk_gamma,
            proj_beta: proj_beta_grads,
            proj_gamma: proj_gamma_grads,
        })
    }
}

impl ModulatedGrads {
    pub fn flatten(&self, net: &ModulatedNet) -> Vec<f64> {
        net.grad_buffers(self).concat()
    }
}

impl Parameterized for ModulatedNet {
    type Grads = ModulatedGrads;

    fn params(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        let nets = [
            ("base", Some(&self.base)),
            ("trunk_beta", self.trunk_beta.as_ref()),
            ("trunk_gamma", self.trunk_gamma.as_ref()),
        ];
        for (prefix, net) in nets {
            for (name, p) in net.into_iter().flat_map(Network::params) {
                out.push((format!("{prefix}.{name}"), p));
            }
        }
        for (tag, projs) in [
            ("proj_beta", &self.proj_beta),
            ("proj_gamma", &self.proj_gamma),
        ] {
            for (i, p) in projs.iter().enumerate() {
                if let Some(p) = p {
                    out.push((format!("{tag}{i}.weights"), p.weights().data()));
                    out.push((format!("{tag}{i}.bias"), p.bias().data()));
                }
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.stamp = fresh_stamp();
        let mut out = Vec::new();
        for (name, p) in self.base.params_mut() {
            out.push((format!("base.{name}"), p));
        }
        if let Some(t) = &mut self.trunk_beta {
            for (name, p) in t.params_mut() {
                out.push((format!("trunk_beta.{name}"), p));
            }
        }
        if let Some(t) = &mut self.trunk_gamma {
            for (name, p) in t.params_mut() {
                out.push((format!("trunk_gamma.{name}"), p));
            }
        }
        for (tag, projs) in [
            ("proj_beta", &mut self.proj_beta),
            ("proj_gamma", &mut self.proj_gamma),
        ] {
            for (i, p) in projs.iter_mut().enumerate() {
                if let Some(p) = p {
                    let (w, b) = p.buffers_mut();
                    out.push((format!("{tag}{i}.weights"), w));
                    out.push((format!("{tag}{i}.bias"), b));
                }
            }
        }
        out
    }

    fn grad_buffers<'a>(&self, grads: &'a ModulatedGrads) -> Vec<&'a [f64]> {
        let mut out = self.base.grad_buffers(&grads.base);
        if let (Some(t), Some(g)) = (&self.trunk_beta, &grads.trunk_beta) {
            out.extend(t.grad_buffers(g));
        }
        if let (Some(t), Some(g)) = (&self.trunk_gamma, &grads.trunk_gamma) {
            out.extend(t.grad_buffers(g));
        }
        for (projs, pgrads) in [
            (&self.proj_beta, &grads.proj_beta),
            (&self.proj_gamma, &grads.proj_gamma),
        ] {
            for (p, g) in projs.iter().zip(pgrads) {
                if p.is_some() {
                    if let Some(g) = g {
                        out.push(g.weights.data());
                        out.push(g.bias.data());
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatModConfig {
    pub layer_mask: Option<Vec<bool>>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for FeatModConfig {
    fn default() -> Self {
        Self {
            layer_mask: None,
            epochs: 30,
            batch_size: 32,
            optimizer: OptimizerConfig::rmsprop(0.0045, 0.94, 4),
            seed: 0,
        }
    }
}

/// Trains base, trunks and projections together. The base starts from
/// `init_base`; location parts start fresh with identity projections.
pub fn train_joint(
    features: &Tensor,
    geos: &[NormalizedGeo],
    labels: &[usize],
    init_base: &Network,
    variant: ModulationVariant,
    config: &FeatModConfig,
) -> Result<TrainOutcome<ModulatedNet>> {
    if labels.is_empty() {
        return Err(Error::Empty("feature-modulation training set"));
    }
    if features.rows() != labels.len() || geos.len() != labels.len() {
        return Err(Error::ShapeMismatch(
            "features, locations and labels differ in length".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = ModulatedNet::new(
        init_base.clone(),
        variant,
        config.layer_mask.clone(),
        rng.random(),
    )?;
    let mut opt = Optimizer::new(config.optimizer.clone())?;
    let geo_all = geo_matrix(geos);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        opt.set_epoch(epoch);
        let mut total = 0.0;
        for batch in epoch_batches(labels.len(), config.batch_size, &mut rng) {
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (logits, cache) = net.forward(
                &gather_rows(features, &batch),
                &gather_rows(&geo_all, &batch),
            )?;
            let (loss, dlogits) = softmax_xent_batch(&logits, &y)?;
            let grads = net.backward(&cache, &dlogits)?;
            opt.step(&mut net, &grads)?;
            total += loss * batch.len() as f64;
        }
        let mean = total / labels.len() as f64;
        log::debug!("featmod[{variant}] epoch {epoch}: loss {mean:.5}");
        history.push(mean);
    }
    Ok(TrainOutcome {
        model: net,
        loss_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micronet::{argmax, max_relative_error, numeric_gradient, FD_STEP};

    fn base_net(seed: u64, sizes: &[usize]) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Network::mlp(sizes, Activation::Relu, Activation::Identity, &mut rng).unwrap()
    }

    fn random_batch(seed: u64, rows: usize, dim: usize) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Tensor::matrix(
            rows,
            dim,
            (0..rows * dim)
                .map(|_| rng.random_range(-1.5..1.5))
                .collect(),
        )
        .unwrap();
        let g = Tensor::matrix(
            rows,
            2,
            (0..rows * 2).map(|_| rng.random_range(-0.9..0.9)).collect(),
        )
        .unwrap();
        (f, g)
    }

    #[test]
    fn variant_identities() {
        let pre = [-1.0, 0.5, 2.0];
        let post = [0.0, 0.5, 2.0];
        let zero = [0.0; 3];
        let out = apply_variant(
            &pre,
            &post,
            None,
            Some(&zero),
            ModulationVariant::AddRawBeta,
        )
        .unwrap();
        assert_eq!(out, post.to_vec());
        let out = apply_variant(
            &pre,
            &post,
            Some(&[1.0; 3]),
            Some(&zero),
            ModulationVariant::Film,
        )
        .unwrap();
        assert_eq!(out, post.to_vec());
        let out = apply_variant(
            &pre,
            &post,
            Some(&[50.0; 3]),
            None,
            ModulationVariant::SigmoidGammaOnly,
        )
        .unwrap();
        for (o, p) in out.iter().zip(post) {
            assert!((o - p).abs() < 1e-20);
        }
        assert!(apply_variant(
            &pre,
            &post,
            None,
            Some(&[0.0; 2]),
            ModulationVariant::AddRawBeta
        )
        .is_err());
        assert!(apply_variant(&pre, &post, None, Some(&zero), ModulationVariant::Film).is_err());
    }

    #[test]
    fn variant_formulas() {
        let (pre, post, g, b): ([f64; 2], [f64; 2], [f64; 2], [f64; 2]) =
            ([-0.5, 1.5], [0.0, 1.5], [-2.0, 0.7], [-0.3, 0.4]);
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expect = |v: ModulationVariant| -> Vec<f64> {
            (0..2)
                .map(|i| match v {
                    ModulationVariant::Film => (g[i] * pre[i] + b[i]).max(0.0),
                    ModulationVariant::ReluGammaAdd => g[i].max(0.0) * post[i] + b[i].max(0.0),
                    ModulationVariant::SigmoidGammaAdd => s(g[i]) * post[i] + b[i].max(0.0),
                    ModulationVariant::SigmoidGammaOnly => s(g[i]) * post[i],
                    ModulationVariant::AddReluBeta => post[i] + b[i].max(0.0),
                    ModulationVariant::AddRawBeta => post[i] + b[i],
                })
                .collect()
        };
        for v in ModulationVariant::ALL {
            let out = apply_variant(&pre, &post, Some(&g), Some(&b), v).unwrap();
            for (o, e) in out.iter().zip(expect(v)) {
                assert!((o - e).abs() < 1e-15, "{v}");
            }
        }
    }

    #[test]
    fn variant_tags_round_trip() {
        for v in ModulationVariant::ALL {
            assert_eq!(v.as_str().parse::<ModulationVariant>().unwrap(), v);
        }
        assert!("nope".parse::<ModulationVariant>().is_err());
    }

    #[test]
    fn default_mask_is_upper_half() {
        assert_eq!(default_layer_mask(1), vec![true]);
        assert_eq!(default_layer_mask(2), vec![false, true]);
        assert_eq!(default_layer_mask(3), vec![false, true, true]);
        assert_eq!(default_layer_mask(4), vec![false, false, true, true]);
    }

    #[test]
    fn trunks_and_projections_follow_variant() {
        for v in ModulationVariant::ALL {
            let net = ModulatedNet::new(base_net(1, &[4, 8, 8, 8, 3]), v, None, 2).unwrap();
            assert_eq!(net.has_gamma_trunk(), v.uses_gamma());
            assert_eq!(net.trunk_beta.is_some(), v.uses_beta());
            for (i, m) in net.layer_mask().iter().enumerate() {
                assert_eq!(net.proj_beta[i].is_some(), *m && v.uses_beta());
                assert_eq!(net.proj_gamma[i].is_some(), *m && v.uses_gamma());
            }
            net.validate().unwrap();
        }
    }

    #[test]
    fn identity_at_init_is_bit_exact() {
        let base = base_net(3, &[4, 16, 16, 16, 5]);
        let (f, g) = random_batch(4, 16, 4);
        let reference = base.predict(&f).unwrap();
        for v in ModulationVariant::ALL {
            let net = ModulatedNet::new(base.clone(), v, None, 5).unwrap();
            let out = net.forward(&f, &g).unwrap().0;
            if v.identity_at_init() {
                let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&out), bits(&reference), "{v}");
            } else {
                assert_ne!(out, reference, "{v}");
            }
        }
    }

    #[test]
    fn unmasked_layers_are_untouched() {
        let base = base_net(6, &[3, 6, 6, 6, 2]);
        let mut net = ModulatedNet::new(
            base.clone(),
            ModulationVariant::Film,
            Some(vec![false, false, true]),
            1,
        )
        .unwrap();
        net.randomize_projections(9);
        let (f, g) = random_batch(7, 5, 3);
        let (_, cache) = net.forward(&f, &g).unwrap();
        let (_, bc) = base.forward(&f).unwrap();
        for i in 0..2 {
            assert_eq!(cache.post[i], *bc.tap(i).unwrap());
            assert_eq!(cache.inputs[i + 1], *bc.tap(i).unwrap());
        }
    }

    #[test]
    fn forward_matches_composition_of_apply_variant() {
        let base = base_net(8, &[3, 5, 5, 4]);
        let (f, g) = random_batch(9, 3, 3);
        for v in ModulationVariant::ALL {
            let mut net = ModulatedNet::new(base.clone(), v, Some(vec![true, true]), 10).unwrap();
            net.randomize_projections(11);
            let out = net.forward(&f, &g).unwrap().0;
            // hand composition through public pieces
            let emb = |t: &Option<Network>| t.as_ref().map(|t| t.predict(&g).unwrap());
            let (eb, eg) = (emb(&net.trunk_beta), emb(&net.trunk_gamma));
            let mut x = f.clone();
            for i in 0..2 {
                let layer = &base.layers()[i];
                let pre = layer.linear(&x).unwrap();
                let post = layer.activate(&pre);
                let beta = net.proj_beta[i]
                    .as_ref()
                    .map(|p| p.linear(eb.as_ref().unwrap()).unwrap());
                let gamma = net.proj_gamma[i]
                    .as_ref()
                    .map(|p| p.linear(eg.as_ref().unwrap()).unwrap());
                let mut rows = Vec::new();
                for r in 0..pre.rows() {
                    rows.push(
                        apply_variant(
                            pre.row(r),
                            post.row(r),
                            gamma.as_ref().map(|t| t.row(r)),
                            beta.as_ref().map(|t| t.row(r)),
                            v,
                        )
                        .unwrap(),
                    );
                }
                x = Tensor::from_rows(&rows).unwrap();
            }
            let expected = base.layers()[2].linear(&x).unwrap();
            assert_eq!(out, expected, "{v}");
        }
    }

    fn kink_margin(net: &ModulatedNet, f: &Tensor, g: &Tensor) -> f64 {
        net.forward(f, g).unwrap().1.kink_margin()
    }

    #[test]
    fn gradients_match_finite_differences_for_every_variant() {
        for v in ModulationVariant::ALL {
            let mut checked = false;
            for seed in 0..40 {
                let base = base_net(100 + seed, &[3, 4, 4, 3]);
                let mut net =
                    ModulatedNet::with_trunk(base, v, Some(vec![true, true]), &[6, 5], seed)
                        .unwrap();
                net.randomize_projections(200 + seed);
                let (f, g) = random_batch(300 + seed, 1, 3);
                if kink_margin(&net, &f, &g) < 1e-4 {
                    continue;
                }
                let labels = [2];
                let (logits, cache) = net.forward(&f, &g).unwrap();
                let (_, dl) = softmax_xent_batch(&logits, &labels).unwrap();
                let grads = net.backward(&cache, &dl).unwrap();
                let analytic = grads.flatten(&net);
                let numeric = numeric_gradient(&mut net, FD_STEP, |m: &ModulatedNet| {
                    Ok(softmax_xent_batch(&m.forward(&f, &g)?.0, &labels)?.0)
                })
                .unwrap();
                let err = max_relative_error(&analytic, &numeric);
                assert!(err < 1e-4, "{v}: relative error {err}");
                checked = true;
                break;
            }
            assert!(checked, "{v}: no kink-free sample found");
        }
    }

    #[test]
    fn one_step_moves_outputs() {
        let base = base_net(12, &[3, 6, 6, 3]);
        let (f, g) = random_batch(13, 8, 3);
        let labels: Vec<usize> = (0..8).map(|i| i % 3).collect();
        for v in [ModulationVariant::AddRawBeta, ModulationVariant::Film] {
            let mut net = ModulatedNet::new(base.clone(), v, None, 14).unwrap();
            let before = net.forward(&f, &g).unwrap().0;
            let (logits, cache) = net.forward(&f, &g).unwrap();
            let (_, dl) = softmax_xent_batch(&logits, &labels).unwrap();
            let grads = net.backward(&cache, &dl).unwrap();
            let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1)).unwrap();
            opt.step(&mut net, &grads).unwrap();
            assert_ne!(net.forward(&f, &g).unwrap().0, before);
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let mut net = ModulatedNet::new(
            base_net(1, &[3, 4, 2]),
            ModulationVariant::AddRawBeta,
            None,
            1,
        )
        .unwrap();
        let (f, g) = random_batch(2, 2, 3);
        let (logits, cache) = net.forward(&f, &g).unwrap();
        net.beta_zero_init();
        assert!(matches!(
            net.backward(&cache, &logits),
            Err(Error::StaleCache)
        ));
    }

    #[test]
    fn joint_training_uses_location() {
        // the label is decided by longitude alone
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let n = 600;
        let mut feats = Vec::new();
        let mut geos = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let l = rng.random_range(0..2usize);
            feats.push(vec![1.0, -0.5, 0.25]);
            let y = if l == 0 {
                rng.random_range(-0.8..-0.2)
            } else {
                rng.random_range(0.2..0.8)
            };
            geos.push(NormalizedGeo {
                x: rng.random_range(-0.5..0.5),
                y,
            });
            labels.push(l);
        }
        let feats = Tensor::from_rows(&feats).unwrap();
        let base = base_net(21, &[3, 8, 8, 2]);
        let cfg = FeatModConfig {
            epochs: 15,
            ..Default::default()
        };
        let out = train_joint(
            &feats,
            &geos,
            &labels,
            &base,
            ModulationVariant::AddRawBeta,
            &cfg,
        )
        .unwrap();
        let logits = out.model.predict(&feats, &geos).unwrap();
        let acc = (0..n)
            .filter(|&i| argmax(logits.row(i)) == labels[i])
            .count() as f64
            / n as f64;
        assert!(acc > 0.95, "accuracy {acc}");
        assert!(train_joint(
            &Tensor::zeros(vec![0, 3]),
            &[],
            &[],
            &base,
            ModulationVariant::Film,
            &cfg
        )
        .is_err());
    }
}
