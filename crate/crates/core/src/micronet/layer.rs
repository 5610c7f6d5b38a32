use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => super::loss::logistic(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the cached pre- and post-activation values.
    /// ReLU uses the zero subgradient at the kink.
    pub fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => post * (1.0 - post),
            Activation::Identity => 1.0,
        }
    }
}

/// Gradients of one dense layer, shaped like its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl LayerGrads {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        Self {
            weights: Tensor::zeros(vec![layer.outputs(), layer.inputs()]),
            bias: Tensor::zeros(vec![layer.outputs()]),
        }
    }
}

/// Fully connected layer `y = act(x W^T + b)` with `W` stored `[out, in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    weights: Tensor,
    bias: Tensor,
    activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        let layer = Self {
            weights,
            bias,
            activation,
        };
        layer.validate()?;
        Ok(layer)
    }

    /// Uniform init in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let data = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            weights: Tensor::new(vec![outputs, inputs], data).expect("sized above"),
            bias: Tensor::zeros(vec![outputs]),
            activation,
        }
    }

    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            weights: Tensor::zeros(vec![outputs, inputs]),
            bias: Tensor::zeros(vec![outputs]),
            activation,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let ws = self.weights.shape();
        if ws.len() != 2 || self.bias.shape() != [ws[0]] {
            return Err(Error::ShapeMismatch(format!(
                "dense layer weights {ws:?} with bias {:?}",
                self.bias.shape()
            )));
        }
        if !self.weights.is_finite() || !self.bias.is_finite() {
            return Err(Error::Numeric("non-finite layer parameter".into()));
        }
        Ok(())
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    /// Weight and bias buffers for in-place updates.
    pub(crate) fn buffers_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (self.weights.data_mut(), self.bias.data_mut())
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Pre-activation `x W^T + b` for a `[batch, in]` input.
    pub fn linear(&self, x: &Tensor) -> Result<Tensor> {
        let (n_in, n_out) = (self.inputs(), self.outputs());
        if x.shape().len() != 2 || x.cols() != n_in {
            return Err(Error::ShapeMismatch(format!(
                "layer expects [batch, {n_in}], got {:?}",
                x.shape()
            )));
        }
        let batch = x.rows();
        let mut out = Tensor::zeros(vec![batch, n_out]);
        let w = self.weights.data();
        let b = self.bias.data();
        for r in 0..batch {
            let xr = x.row(r);
            let or = out.row_mut(r);
            for (j, o) in or.iter_mut().enumerate() {
                *o = b[j] + dot(&w[j * n_in..(j + 1) * n_in], xr);
            }
        }
        Ok(out)
    }

    pub fn activate(&self, pre: &Tensor) -> Tensor {
        let act = self.activation;
        pre.map(|v| act.apply(v))
    }

    /// Chains an upstream gradient through the activation.
    pub(crate) fn activation_backward(
        &self,
        pre: &Tensor,
        post: &Tensor,
        dpost: &Tensor,
    ) -> Tensor {
        let act = self.activation;
        let data = pre
            .data()
            .iter()
            .zip(post.data())
            .zip(dpost.data())
            .map(|((&p, &q), &g)| g * act.derivative(p, q))
            .collect();
        Tensor::new(pre.shape().to_vec(), data).expect("same shape")
    }

    /// Parameter and input gradients given the layer input and `dL/d(pre)`.
    pub(crate) fn linear_backward(&self, x: &Tensor, dpre: &Tensor) -> (LayerGrads, Tensor) {
        let (n_in, n_out) = (self.inputs(), self.outputs());
        let batch = x.rows();
        let mut grads = LayerGrads::zeros_like(self);
        let mut dx = Tensor::zeros(vec![batch, n_in]);
        let w = self.weights.data();
        let dw = grads.weights.data_mut();
        let db = grads.bias.data_mut();
        for r in 0..batch {
            let xr = x.row(r);
            let gr = dpre.row(r);
            let dxr = dx.row_mut(r);
            for j in 0..n_out {
                let g = gr[j];
                if g == 0.0 {
                    continue;
                }
                db[j] += g;
                axpy(g, xr, &mut dw[j * n_in..(j + 1) * n_in]);
                axpy(g, &w[j * n_in..(j + 1) * n_in], dxr);
            }
        }
        (grads, dx)
    }
}

/// Dot product with four independent accumulators; summation order is fixed.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
