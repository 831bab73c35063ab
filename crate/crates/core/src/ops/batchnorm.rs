use serde::{Deserialize, Serialize};

use super::BatchNormParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const BN_EPSILON: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Train,
    Eval,
}

/// Values kept from a training-mode forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub normalized: Tensor4,
    pub inv_std: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrads {
    pub grad_input: Tensor4,
    pub grad_gamma: Vec<f32>,
    pub grad_beta: Vec<f32>,
}

fn check_channels(input: &Tensor4, params: &BatchNormParams) -> Result<()> {
    let c = input.dims()[1];
    if params.channels() != c {
        return Err(Error::shape(
            "batchnorm",
            format!("{} channels", params.channels()),
            format!("{c} channels"),
        ));
    }
    Ok(())
}

/// Normalizes with the running statistics.
pub fn batchnorm_forward_eval(input: &Tensor4, params: &BatchNormParams, eps: f32) -> Result<Tensor4> {
    check_channels(input, params)?;
    params.check("batchnorm")?;
    let [batch, c, _, _] = input.dims();
    let plane = input.plane_len();
    let mut out = input.clone();
    let data = out.data_mut();
    for j in 0..c {
        let scale = params.gamma[j] / (params.running_var[j] + eps).sqrt();
        let mean = params.running_mean[j];
        let beta = params.beta[j];
        for b in 0..batch {
            let start = (b * c + j) * plane;
            for v in &mut data[start..start + plane] {
                *v = (*v - mean) * scale + beta;
            }
        }
    }
    Ok(out)
}

/// Normalizes with batch statistics (biased variance) and folds them into the
/// running estimates with the given momentum. The running variance is updated
/// with the unbiased batch variance.
pub fn batchnorm_forward_train(
    input: &Tensor4,
    params: &mut BatchNormParams,
    eps: f32,
    momentum: f32,
) -> Result<(Tensor4, BatchNormCache)> {
    check_channels(input, params)?;
    params.check("batchnorm")?;
    let [batch, c, _, _] = input.dims();
    let plane = input.plane_len();
    let count = batch * plane;
    if count == 0 {
        return Err(Error::shape("batchnorm", "at least one value per channel", 0));
    }
    let mut normalized = input.clone();
    let mut inv_std = vec![0.0f32; c];
    let data = normalized.data_mut();
    for j in 0..c {
        let mut sum = 0.0f64;
        for b in 0..batch {
            let start = (b * c + j) * plane;
            sum += data[start..start + plane].iter().map(|&v| v as f64).sum::<f64>();
        }
        let mean = sum / count as f64;
        let mut sq = 0.0f64;
        for b in 0..batch {
            let start = (b * c + j) * plane;
            sq += data[start..start + plane]
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>();
        }
        let var = sq / count as f64;
        let istd = 1.0 / (var + eps as f64).sqrt();
        inv_std[j] = istd as f32;
        for b in 0..batch {
            let start = (b * c + j) * plane;
            for v in &mut data[start..start + plane] {
                *v = ((*v as f64 - mean) * istd) as f32;
            }
        }
        let unbiased = if count > 1 { sq / (count - 1) as f64 } else { var };
        let m = momentum as f64;
        params.running_mean[j] = ((1.0 - m) * params.running_mean[j] as f64 + m * mean) as f32;
        params.running_var[j] = ((1.0 - m) * params.running_var[j] as f64 + m * unbiased) as f32;
    }
    let mut out = normalized.clone();
    let od = out.data_mut();
    for b in 0..batch {
        for j in 0..c {
            let start = (b * c + j) * plane;
            for v in &mut od[start..start + plane] {
                *v = *v * params.gamma[j] + params.beta[j];
            }
        }
    }
    Ok((out, BatchNormCache { normalized, inv_std }))
}

/// Mode-dispatching wrapper. Running statistics are only touched in train mode.
pub fn batchnorm_forward(input: &Tensor4, params: &mut BatchNormParams, mode: BnMode) -> Result<Tensor4> {
    match mode {
        BnMode::Eval => batchnorm_forward_eval(input, params, BN_EPSILON),
        BnMode::Train => batchnorm_forward_train(input, params, BN_EPSILON, BN_MOMENTUM).map(|(y, _)| y),
    }
}

/// Backward of the training-mode forward pass.
pub fn batchnorm_backward(
    grad_out: &Tensor4,
    cache: &BatchNormCache,
    params: &BatchNormParams,
) -> Result<BatchNormGrads> {
    if grad_out.dims() != cache.normalized.dims() {
        return Err(Error::shape(
            "batchnorm backward",
            format!("{:?}", cache.normalized.dims()),
            format!("{:?}", grad_out.dims()),
        ));
    }
    let [batch, c, _, _] = grad_out.dims();
    let plane = grad_out.plane_len();
    let n = (batch * plane) as f64;
    let g = grad_out.data();
    let xh = cache.normalized.data();
    let mut grad_gamma = vec![0.0f32; c];
    let mut grad_beta = vec![0.0f32; c];
    let mut gx = Tensor4::zeros(grad_out.dims());
    let gxd = gx.data_mut();
    for j in 0..c {
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for b in 0..batch {
            let start = (b * c + j) * plane;
            for i in start..start + plane {
                sum_g += g[i] as f64;
                sum_gx += g[i] as f64 * xh[i] as f64;
            }
        }
        grad_beta[j] = sum_g as f32;
        grad_gamma[j] = sum_gx as f32;
        let gamma = params.gamma[j] as f64;
        let istd = cache.inv_std[j] as f64;
        for b in 0..batch {
            let start = (b * c + j) * plane;
            for i in start..start + plane {
                let v = gamma * istd / n * (n * g[i] as f64 - sum_g - xh[i] as f64 * sum_gx);
                gxd[i] = v as f32;
            }
        }
    }
    Ok(BatchNormGrads {
        grad_input: gx,
        grad_gamma,
        grad_beta,
    })
}
