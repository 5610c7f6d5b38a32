use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layer::{Activation, DenseLayer, LayerGrads};
use super::tensor::Tensor;
use super::Parameterized;
use crate::error::{Error, Result};

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

/// Identifier of one parameter state; changes whenever parameters may change.
pub(crate) fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Ordered stack of dense layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<DenseLayer>,
    #[serde(skip, default = "fresh_stamp")]
    stamp: u64,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Values recorded by [`Network::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stamp: u64,
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
    post: Vec<Tensor>,
}

impl ForwardCache {
    /// Post-activation output of hidden or output layer `i`.
    pub fn tap(&self, i: usize) -> Option<&Tensor> {
        self.post.get(i)
    }

    pub fn pre_activation(&self, i: usize) -> Option<&Tensor> {
        self.pre.get(i)
    }

    /// The input fed to layer `i`.
    pub fn layer_input(&self, i: usize) -> Option<&Tensor> {
        self.inputs.get(i)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net.layers.iter().map(LayerGrads::zeros_like).collect(),
        }
    }

    /// All gradient values in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|g| g.weights.data().iter().chain(g.bias.data()))
            .copied()
            .collect()
    }
}

impl Network {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        let net = Self {
            layers,
            stamp: fresh_stamp(),
        };
        net.validate()?;
        Ok(net)
    }

    /// Multi-layer perceptron over `sizes = [in, h1, ..., out]`; hidden layers
    /// use `hidden`, the last layer uses `output`.
    pub fn mlp<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "mlp needs at least two positive sizes, got {sizes:?}"
            )));
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                DenseLayer::glorot(sizes[i], sizes[i + 1], act, rng)
            })
            .collect();
        Self::new(layers)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("network has no layers".into()));
        }
        for l in &self.layers {
            l.validate()?;
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].outputs(),
                    i + 1,
                    pair[1].inputs()
                )));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::parameter_count).sum()
    }

    /// Mutable layer access; invalidates outstanding caches.
    pub(crate) fn layers_mut(&mut self) -> &mut [DenseLayer] {
        self.stamp = fresh_stamp();
        &mut self.layers
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let n = self.layers.len();
        let mut cache = ForwardCache {
            stamp: self.stamp,
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            post: Vec::with_capacity(n),
        };
        let mut x = input.clone();
        for layer in &self.layers {
            let pre = layer.linear(&x)?;
            let post = layer.activate(&pre);
            cache.inputs.push(x);
            cache.pre.push(pre);
            x = post.clone();
            cache.post.push(post);
        }
        x.ensure_finite("network output")?;
        Ok((x, cache))
    }

    /// Forward pass without recording a cache.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = self.layers[0].activate(&self.layers[0].linear(input)?);
        for layer in &self.layers[1..] {
            x = layer.activate(&layer.linear(&x)?);
        }
        x.ensure_finite("network output")?;
        Ok(x)
    }

    /// Gradients of every parameter and of the input, given `dL/d(output)`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_output: &Tensor,
    ) -> Result<(Gradients, Tensor)> {
        if cache.stamp != self.stamp || cache.pre.len() != self.layers.len() {
            return Err(Error::StaleCache);
        }
        let out = &cache.post[cache.post.len() - 1];
        if out.shape() != grad_output.shape() {
            return Err(Error::ShapeMismatch(format!(
                "output gradient {:?} vs output {:?}",
                grad_output.shape(),
                out.shape()
            )));
        }
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        let mut upstream = grad_output.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let dpre = layer.activation_backward(&cache.pre[i], &cache.post[i], &upstream);
            let (g, dx) = layer.linear_backward(&cache.inputs[i], &dpre);
            layer_grads.push(g);
            upstream = dx;
        }
        layer_grads.reverse();
        Ok((
            Gradients {
                layers: layer_grads,
            },
            upstream,
        ))
    }
}

impl Parameterized for Network {
    type Grads = Gradients;

    fn params(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weights"), l.weights().data()));
            out.push((format!("layer{i}.bias"), l.bias().data()));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, l) in self.layers_mut().iter_mut().enumerate() {
            let (w, b) = l.buffers_mut();
            out.push((format!("layer{i}.weights"), w));
            out.push((format!("layer{i}.bias"), b));
        }
        out
    }

    fn grad_buffers<'a>(&self, grads: &'a Gradients) -> Vec<&'a [f64]> {
        grads
            .layers
            .iter()
            .flat_map(|g| [g.weights.data(), g.bias.data()])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn identity_layer_passes_input_through() {
        let eye = Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let layer = DenseLayer::new(eye, Tensor::zeros(vec![3]), Activation::Identity).unwrap();
        let net = Network::new(vec![layer]).unwrap();
        let x = Tensor::matrix(2, 3, vec![1.5, -2.0, 0.25, 3.0, 4.0, -5.0]).unwrap();
        let (y, _) = net.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_relu_layer_gives_zero() {
        let net = Network::new(vec![DenseLayer::zeros(4, 2, Activation::Relu)]).unwrap();
        let x = Tensor::matrix(1, 4, vec![1.0, -1.0, 2.0, 3.0]).unwrap();
        assert_eq!(net.predict(&x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn two_layer_forward_matches_hand_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net =
            Network::mlp(&[3, 4, 2], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let x = [0.3, -1.2, 0.8];
        let (y, _) = net
            .forward(&Tensor::matrix(1, 3, x.to_vec()).unwrap())
            .unwrap();

        let l0 = &net.layers()[0];
        let l1 = &net.layers()[1];
        let mut h = [0.0; 4];
        for j in 0..4 {
            let mut s = l0.bias().data()[j];
            for i in 0..3 {
                s += l0.weights().data()[j * 3 + i] * x[i];
            }
            h[j] = s.max(0.0);
        }
        for k in 0..2 {
            let mut s = l1.bias().data()[k];
            for j in 0..4 {
                s += l1.weights().data()[k * 4 + j] * h[j];
            }
            assert!((y.data()[k] - s).abs() < 1e-14);
        }
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::mlp(&[3, 2], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let bad = Tensor::matrix(1, 4, vec![0.0; 4]).unwrap();
        assert!(matches!(net.forward(&bad), Err(Error::ShapeMismatch(_))));
        assert!(Network::new(vec![
            DenseLayer::zeros(3, 2, Activation::Relu),
            DenseLayer::zeros(3, 1, Activation::Relu)
        ])
        .is_err());
    }

    #[test]
    fn linear_layer_gradient_closed_form() {
        // L = ||W x + b - y||^2 ; dL/dW = 2 (Wx + b - y) x^T
        let w = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5]).unwrap();
        let b = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
        let net = Network::new(vec![DenseLayer::new(w, b, Activation::Identity).unwrap()]).unwrap();
        let x = [1.0, 2.0, -1.0];
        let y = [0.3, 0.7];
        let (out, cache) = net
            .forward(&Tensor::matrix(1, 3, x.to_vec()).unwrap())
            .unwrap();
        let resid: Vec<f64> = out.data().iter().zip(y).map(|(o, t)| o - t).collect();
        let dout = Tensor::matrix(1, 2, resid.iter().map(|r| 2.0 * r).collect()).unwrap();
        let (g, _) = net.backward(&cache, &dout).unwrap();
        for j in 0..2 {
            for i in 0..3 {
                let expected = 2.0 * resid[j] * x[i];
                assert!((g.layers[0].weights.data()[j * 3 + i] - expected).abs() < 1e-14);
            }
            assert!((g.layers[0].bias.data()[j] - 2.0 * resid[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_loss_gradient_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Network::mlp(
            &[2, 5, 3],
            Activation::Sigmoid,
            Activation::Identity,
            &mut rng,
        )
        .unwrap();
        let (out, cache) = net
            .forward(&Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let (g, dx) = net
            .backward(&cache, &Tensor::zeros(out.shape().to_vec()))
            .unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net =
            Network::mlp(&[2, 3], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let (out, cache) = net
            .forward(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap())
            .unwrap();
        net.params_mut()[0].1[0] += 0.5;
        assert!(matches!(
            net.backward(&cache, &Tensor::zeros(out.shape().to_vec())),
            Err(Error::StaleCache)
        ));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Network::mlp(
            &[4, 16, 16, 3],
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        )
        .unwrap();
        let x = Tensor::matrix(2, 4, vec![0.1, 0.2, -0.3, 0.4, 1.0, -2.0, 3.0, -4.0]).unwrap();
        let a = net.predict(&x).unwrap();
        let b = net.forward(&x).unwrap().0;
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
