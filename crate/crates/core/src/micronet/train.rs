use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::Activation;
use super::loss::softmax_xent_batch;
use super::network::Network;
use super::optim::{Optimizer, OptimizerConfig};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Settings for a plain softmax classifier over feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 30,
            batch_size: 32,
            optimizer: OptimizerConfig::sgd(0.05),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
}

/// Shuffled mini-batch index lists for one epoch.
pub(crate) fn epoch_batches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Gathers the given rows of `x` into a new matrix.
pub(crate) fn gather_rows(x: &Tensor, rows: &[usize]) -> Tensor {
    let c = x.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(x.row(r));
    }
    Tensor::matrix(rows.len(), c, data).expect("sized above")
}

/// Trains an MLP with ReLU hidden layers and a linear logit layer using
/// mini-batch softmax cross-entropy.
pub fn train_classifier(
    features: &Tensor,
    labels: &[usize],
    classes: usize,
    config: &ClassifierConfig,
) -> Result<TrainOutcome<Network>> {
    if labels.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if features.rows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows for {} labels",
            features.rows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sizes = vec![features.cols()];
    sizes.extend(&config.hidden);
    sizes.push(classes);
    let mut net = Network::mlp(&sizes, Activation::Relu, Activation::Identity, &mut rng)?;
    let mut opt = Optimizer::new(config.optimizer.clone())?;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        opt.set_epoch(epoch);
        let mut total = 0.0;
        for batch in epoch_batches(labels.len(), config.batch_size, &mut rng) {
            let x = gather_rows(features, &batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (logits, cache) = net.forward(&x)?;
            let (loss, dlogits) = softmax_xent_batch(&logits, &y)?;
            let (grads, _) = net.backward(&cache, &dlogits)?;
            opt.step(&mut net, &grads)?;
            total += loss * batch.len() as f64;
        }
        history.push(total / labels.len() as f64);
    }
    Ok(TrainOutcome {
        model: net,
        loss_history: history,
    })
}
