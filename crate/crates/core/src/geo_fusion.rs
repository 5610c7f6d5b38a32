//! Post-processing fusion of a frozen image classifier with a location network.
//!
//! The location network maps normalised (lat, lon) to one logit per label.
//! Those logits are added to the inverse-logistic of the base classifier's
//! probabilities and the sum is renormalised with a softmax. Under conditional
//! independence of appearance and location given the label, adding the true
//! log likelihood ratio `log R` to `σ⁻¹(P(L | I))` recovers `P(L | I, G)`
//! exactly, so the network only has to learn the geographic residual.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesy::NormalizedGeo;
use crate::micronet::{
    argmax, inverse_logistic, logistic, logit_clamped, softmax, softmax_xent_batch, Activation,
    DenseLayer, Gradients, Network, Optimizer, OptimizerConfig, Parameterized, Tensor,
    TrainOutcome,
};
use crate::micronet::{epoch_batches, gather_rows};

/// Hidden widths of the location network.
pub const GEO_HIDDEN: [usize; 3] = [256, 128, 128];

/// Clamp used when inverting exact probabilities in [`oracle_fused_posterior`].
const ORACLE_CLAMP_EPS: f64 = 1e-300;

/// Location network: `2 -> 256 -> 128 -> 128 (relu) -> C (linear)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GeoNet {
    network: Network,
}

impl GeoNet {
    pub fn new(classes: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![2];
        sizes.extend_from_slice(hidden);
        sizes.push(classes);
        Self::from_network(Network::mlp(
            &sizes,
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        )?)
    }

    /// A network whose logits are identically zero.
    pub fn zeros(classes: usize, hidden: &[usize]) -> Result<Self> {
        let mut sizes = vec![2];
        sizes.extend_from_slice(hidden);
        sizes.push(classes);
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                DenseLayer::zeros(sizes[i], sizes[i + 1], act)
            })
            .collect();
        Self::from_network(Network::new(layers)?)
    }

    pub fn from_network(network: Network) -> Result<Self> {
        network.validate()?;
        if network.input_dim() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "location network must take 2 inputs, takes {}",
                network.input_dim()
            )));
        }
        Ok(Self { network })
    }

    pub fn classes(&self) -> usize {
        self.network.output_dim()
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.network
    }

    /// Logits for a batch of locations, `[batch, C]`.
    pub fn logits(&self, geos: &[NormalizedGeo]) -> Result<Tensor> {
        self.network.predict(&geo_matrix(geos))
    }
}

impl Parameterized for GeoNet {
    type Grads = Gradients;

    fn params(&self) -> Vec<(String, &[f64])> {
        self.network.params()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.network.params_mut()
    }

    fn grad_buffers<'a>(&self, grads: &'a Gradients) -> Vec<&'a [f64]> {
        self.network.grad_buffers(grads)
    }
}

/// Stacks normalised locations into an `n × 2` matrix.
pub fn geo_matrix(geos: &[NormalizedGeo]) -> Tensor {
    let data = geos.iter().flat_map(|g| g.as_array()).collect();
    Tensor::matrix(geos.len(), 2, data).expect("two columns per location")
}

/// `σ⁻¹(clamp(p_l)) + geo_l` for every label.
pub fn fuse_logits(base_probs: &[f64], geo_logits: &[f64]) -> Result<Vec<f64>> {
    if base_probs.len() != geo_logits.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} base probabilities vs {} location logits",
            base_probs.len(),
            geo_logits.len()
        )));
    }
    Ok(base_probs
        .iter()
        .zip(geo_logits)
        .map(|(&p, &g)| inverse_logistic(p) + g)
        .collect())
}

/// `σ(σ⁻¹(p) + log R)`, the posterior of one label given image-only
/// probability `p` and the location's log likelihood ratio.
pub fn oracle_fused_posterior(p: f64, log_r: f64) -> f64 {
    logistic(logit_clamped(p, ORACLE_CLAMP_EPS) + log_r)
}

/// One training example for the post-processing model.
#[derive(Debug, Clone, PartialEq)]
pub struct PostprocExample {
    pub label: usize,
    pub geo: NormalizedGeo,
    pub base_probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self {
            hidden: GEO_HIDDEN.to_vec(),
            epochs: 30,
            batch_size: 32,
            optimizer: OptimizerConfig::sgd(0.02),
            seed: 0,
        }
    }
}

/// Mean fused cross-entropy and its gradient with respect to every
/// location-network parameter, for a batch.
pub fn fused_loss_and_grads(
    geo: &GeoNet,
    geos: &Tensor,
    base_logits: &Tensor,
    labels: &[usize],
) -> Result<(f64, Gradients)> {
    let (geo_logits, cache) = geo.network.forward(geos)?;
    let fused = geo_logits.add(base_logits)?;
    let (loss, dfused) = softmax_xent_batch(&fused, labels)?;
    // d fused / d geo_logits is the identity; nothing flows into the base.
    let (grads, _) = geo.network.backward(&cache, &dfused)?;
    Ok((loss, grads))
}

/// Trains a location network on the residual of a frozen base classifier.
pub fn train_postproc(
    data: &[PostprocExample],
    config: &PostprocConfig,
) -> Result<TrainOutcome<GeoNet>> {
    let first = data
        .first()
        .ok_or(Error::Empty("post-processing training set"))?;
    let classes = first.base_probs.len();
    for ex in data {
        if ex.base_probs.len() != classes {
            return Err(Error::ShapeMismatch("base outputs differ in length".into()));
        }
        if ex.label >= classes {
            return Err(Error::LabelOutOfRange {
                label: ex.label,
                classes,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init_seed = rand::Rng::random::<u64>(&mut rng);
    let mut geo = GeoNet::new(classes, &config.hidden, init_seed)?;
    let mut opt = Optimizer::new(config.optimizer.clone())?;

    let geos = geo_matrix(&data.iter().map(|e| e.geo).collect::<Vec<_>>());
    let base_logits = Tensor::from_rows(
        &data
            .iter()
            .map(|e| {
                e.base_probs
                    .iter()
                    .map(|&p| inverse_logistic(p))
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<_>>(),
    )?;
    let labels: Vec<usize> = data.iter().map(|e| e.label).collect();

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        opt.set_epoch(epoch);
        let mut total = 0.0;
        for batch in epoch_batches(data.len(), config.batch_size, &mut rng) {
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = fused_loss_and_grads(
                &geo,
                &gather_rows(&geos, &batch),
                &gather_rows(&base_logits, &batch),
                &y,
            )?;
            opt.step(&mut geo, &grads)?;
            total += loss * batch.len() as f64;
        }
        let mean = total / data.len() as f64;
        log::debug!("postproc epoch {epoch}: loss {mean:.5}");
        history.push(mean);
    }
    Ok(TrainOutcome {
        model: geo,
        loss_history: history,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedPrediction {
    pub label: usize,
    pub probs: Vec<f64>,
}

/// A frozen image classifier paired with a location network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    base: Network,
    geo: GeoNet,
}

impl FusionModel {
    pub fn new(base: Network, geo: GeoNet) -> Result<Self> {
        if base.output_dim() != geo.classes() {
            return Err(Error::LabelMapMismatch(format!(
                "base predicts {} labels, location network {}",
                base.output_dim(),
                geo.classes()
            )));
        }
        Ok(Self { base, geo })
    }

    /// Trains only the location network; `base` is borrowed immutably.
    pub fn train(
        base: &Network,
        features: &Tensor,
        geos: &[NormalizedGeo],
        labels: &[usize],
        config: &PostprocConfig,
    ) -> Result<TrainOutcome<FusionModel>> {
        if features.rows() != geos.len() || geos.len() != labels.len() {
            return Err(Error::ShapeMismatch(
                "features, locations and labels differ in length".into(),
            ));
        }
        let probs = base_probabilities(base, features)?;
        let data: Vec<PostprocExample> = (0..labels.len())
            .map(|i| PostprocExample {
                label: labels[i],
                geo: geos[i],
                base_probs: probs.row(i).to_vec(),
            })
            .collect();
        let out = train_postproc(&data, config)?;
        Ok(TrainOutcome {
            model: FusionModel::new(base.clone(), out.model)?,
            loss_history: out.loss_history,
        })
    }

    pub fn base(&self) -> &Network {
        &self.base
    }

    pub fn geo(&self) -> &GeoNet {
        &self.geo
    }

    pub fn classes(&self) -> usize {
        self.geo.classes()
    }

    pub fn base_probs(&self, features: &[f64]) -> Result<Vec<f64>> {
        let x = Tensor::matrix(1, features.len(), features.to_vec())?;
        Ok(base_probabilities(&self.base, &x)?.row(0).to_vec())
    }

    pub fn predict_fused(&self, base_probs: &[f64], g: NormalizedGeo) -> Result<FusedPrediction> {
        let geo_logits = self.geo.logits(&[g])?;
        let fused = fuse_logits(base_probs, geo_logits.row(0))?;
        let probs = softmax(&fused);
        Ok(FusedPrediction {
            label: argmax(&probs),
            probs,
        })
    }

    pub fn predict(&self, features: &[f64], g: NormalizedGeo) -> Result<FusedPrediction> {
        self.predict_fused(&self.base_probs(features)?, g)
    }
}

/// Row-wise softmax of the base network's logits.
pub fn base_probabilities(base: &Network, features: &Tensor) -> Result<Tensor> {
    let logits = base.predict(features)?;
    let rows: Vec<Vec<f64>> = (0..logits.rows()).map(|r| softmax(logits.row(r))).collect();
    if rows.is_empty() {
        return Ok(Tensor::zeros(vec![0, base.output_dim()]));
    }
    Tensor::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::micronet::{max_relative_error, numeric_gradient, FD_STEP};

    fn ng(x: f64, y: f64) -> NormalizedGeo {
        NormalizedGeo { x, y }
    }

    #[test]
    fn fuse_examples() {
        let base = [0.2, 0.5, 0.3];
        let fused = fuse_logits(&base, &[0.0; 3]).unwrap();
        assert_eq!(argmax(&fused), 1);

        let f = fuse_logits(&[0.5], &[3f64.ln()]).unwrap();
        assert!((logistic(f[0]) - 0.75).abs() < 1e-12);
        let f = fuse_logits(&[0.9], &[-inverse_logistic(0.9)]).unwrap();
        assert!((logistic(f[0]) - 0.5).abs() < 1e-12);

        assert!(matches!(
            fuse_logits(&[0.5, 0.5], &[0.0]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn oracle_posterior_examples() {
        for p in [0.01, 0.3, 0.77] {
            assert!((oracle_fused_posterior(p, 0.0) - p).abs() < 1e-12);
        }
        assert!((oracle_fused_posterior(0.5, 3f64.ln()) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn zero_geo_net_keeps_base_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base =
            Network::mlp(&[3, 8, 4], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let model = FusionModel::new(base, GeoNet::zeros(4, &GEO_HIDDEN).unwrap()).unwrap();
        for _ in 0..20 {
            let f: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let p = model.base_probs(&f).unwrap();
            let a = model.predict(&f, ng(0.1, -0.4)).unwrap();
            let b = model.predict(&f, ng(0.1, -0.4)).unwrap();
            assert_eq!(a.label, argmax(&p));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn fused_gradient_matches_finite_differences() {
        let mut geo = GeoNet::new(3, &[6, 5], 7).unwrap();
        let geos = geo_matrix(&[ng(0.3, -0.2), ng(-0.5, 0.7), ng(0.1, 0.05)]);
        let base =
            Tensor::matrix(3, 3, vec![0.2, -1.0, 0.4, 1.3, 0.0, -0.6, -0.2, 0.9, 0.1]).unwrap();
        let labels = [2, 0, 1];
        let (_, grads) = fused_loss_and_grads(&geo, &geos, &base, &labels).unwrap();
        let numeric = numeric_gradient(&mut geo, FD_STEP, |g: &GeoNet| {
            let fused = g.network().predict(&geos)?.add(&base)?;
            Ok(softmax_xent_batch(&fused, &labels)?.0)
        })
        .unwrap();
        assert!(max_relative_error(&grads.flatten(), &numeric) < 1e-4);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        assert!(matches!(
            train_postproc(&[], &PostprocConfig::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn learns_location_only_signal() {
        // two labels with identical base outputs, separated by longitude
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<PostprocExample> = (0..400)
            .map(|_| {
                let label = rng.random_range(0..2);
                let y = if label == 0 {
                    rng.random_range(-0.9..-0.1)
                } else {
                    rng.random_range(0.1..0.9)
                };
                PostprocExample {
                    label,
                    geo: ng(rng.random_range(-0.5..0.5), y),
                    base_probs: vec![0.5, 0.5],
                }
            })
            .collect();
        let cfg = PostprocConfig {
            hidden: vec![32, 16],
            epochs: 40,
            ..Default::default()
        };
        let out = train_postproc(&data, &cfg).unwrap();
        let logits = out
            .model
            .logits(&data.iter().map(|e| e.geo).collect::<Vec<_>>())
            .unwrap();
        let correct = data
            .iter()
            .enumerate()
            .filter(|(i, e)| {
                argmax(&fuse_logits(&e.base_probs, logits.row(*i)).unwrap()) == e.label
            })
            .count();
        assert!(correct as f64 / data.len() as f64 > 0.95);
        assert!(out.loss_history.last().unwrap() < &out.loss_history[0]);
    }

    #[test]
    fn training_never_touches_the_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base =
            Network::mlp(&[2, 6, 3], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let snapshot: Vec<u64> = base
            .params()
            .iter()
            .flat_map(|(_, p)| p.iter().map(|v| v.to_bits()))
            .collect();
        let feats = Tensor::from_rows(
            &(0..50)
                .map(|i| vec![i as f64 / 50.0, 1.0])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let geos: Vec<NormalizedGeo> = (0..50).map(|i| ng(0.0, i as f64 / 60.0)).collect();
        let labels: Vec<usize> = (0..50).map(|i| i % 3).collect();
        let cfg = PostprocConfig {
            hidden: vec![8],
            epochs: 3,
            ..Default::default()
        };
        let out = FusionModel::train(&base, &feats, &geos, &labels, &cfg).unwrap();
        let after: Vec<u64> = base
            .params()
            .iter()
            .flat_map(|(_, p)| p.iter().map(|v| v.to_bits()))
            .collect();
        assert_eq!(snapshot, after);
        assert_eq!(out.model.base(), &base);
    }
}
