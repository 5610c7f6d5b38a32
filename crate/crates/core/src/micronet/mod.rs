//! A small dense neural-network toolkit: layers, losses, optimizers,
//! backpropagation and finite-difference checking.
//!
//! Everything is `f64` and single-threaded so that training is bit-for-bit
//! reproducible for a fixed seed.

mod checkpoint;
mod gradcheck;
mod layer;
mod loss;
mod network;
mod optim;
mod tensor;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use gradcheck::{grad_check, input_grad_check, max_relative_error, numeric_gradient, FD_STEP};
pub use layer::{Activation, DenseLayer, LayerGrads};
pub(crate) use loss::logit_clamped;
pub use loss::{
    argmax, inverse_logistic, log_sum_exp, logistic, softmax, softmax_xent, softmax_xent_batch,
    squared_error, LOGIT_CLAMP_EPS,
};
pub use network::{ForwardCache, Gradients, Network};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use tensor::Tensor;
pub use train::{train_classifier, ClassifierConfig, TrainOutcome};

pub(crate) use layer::axpy;
pub(crate) use network::fresh_stamp;
pub(crate) use train::{epoch_batches, gather_rows};

/// A model whose parameters can be enumerated as flat buffers.
///
/// `params`, `params_mut` and `grad_buffers` must list buffers in the same
/// order; optimizers and gradient checkers rely on that.
pub trait Parameterized {
    type Grads;

    fn params(&self) -> Vec<(String, &[f64])>;

    /// Mutable parameter buffers. Invalidates outstanding forward caches.
    fn params_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn grad_buffers<'a>(&self, grads: &'a Self::Grads) -> Vec<&'a [f64]>;
}
