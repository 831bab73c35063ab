//! Forward/backward kernels for every layer type the pruning toolkit uses.
//!
//! All kernels are deterministic: for fixed inputs the output is bit-identical
//! regardless of the rayon thread-pool size, because cross-sample reductions
//! are split into fixed-size chunks and summed in chunk order.

mod activation;
mod batchnorm;
mod conv;
mod linear;
mod loss;
mod pool;
mod sgd;

pub use activation::{relu_backward, relu_forward};
pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, batchnorm_forward_eval, batchnorm_forward_train,
    BatchNormCache, BatchNormGrads, BnMode, BN_EPSILON, BN_MOMENTUM,
};
pub use conv::{conv2d_backward, conv2d_forward, conv_output_size, ConvGrads};
pub use linear::{linear_backward, linear_forward, LinearGrads};
pub use loss::{predictions, softmax, softmax_cross_entropy};
pub use pool::{
    avgpool_global_backward, avgpool_global_forward, maxpool2x2_backward, maxpool2x2_forward,
};
pub use sgd::{sgd_step, SgdConfig};

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor4;

/// Samples per reduction chunk when summing parameter gradients across a batch.
pub(crate) const REDUCE_CHUNK: usize = 4;

/// Convolution geometry. Kernels are square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeometry { kernel, stride, pad }
    }
}

/// Weights and bias of a conv or linear layer.
///
/// Conv weights are `out x in x k x k`; linear weights are `out x in x 1 x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Tensor4,
    pub bias: Vec<f32>,
}

impl LayerParams {
    pub fn new(weights: Tensor4, bias: Vec<f32>) -> crate::Result<Self> {
        if bias.len() != weights.dims()[0] {
            return Err(crate::Error::shape(
                "layer params",
                format!("bias of length {}", weights.dims()[0]),
                bias.len(),
            ));
        }
        Ok(LayerParams { weights, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dims()[1]
    }
}

/// Affine parameters and running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

impl BatchNormParams {
    /// Fresh parameters: unit scale, zero shift, zero mean, unit variance.
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub(crate) fn check(&self, layer: &str) -> crate::Result<()> {
        let n = self.gamma.len();
        if self.beta.len() != n || self.running_mean.len() != n || self.running_var.len() != n {
            return Err(crate::Error::shape(
                layer,
                format!("batch-norm vectors of length {n}"),
                format!(
                    "beta {}, mean {}, var {}",
                    self.beta.len(),
                    self.running_mean.len(),
                    self.running_var.len()
                ),
            ));
        }
        if let Some((j, v)) = self
            .running_var
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0))
        {
            return Err(crate::Error::Invariant(format!(
                "{layer}: running variance of channel {j} is {v}, must be strictly positive"
            )));
        }
        Ok(())
    }
}
