use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One SGD update with heavy-ball momentum and L2 weight decay:
///
/// `v <- momentum * v + (g + weight_decay * w)`, `w <- w - lr * v`.
pub fn sgd_step(params: &mut [f32], grads: &[f32], velocity: &mut [f32], cfg: SgdConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("{} gradients and velocities", params.len()),
            format!("{} gradients, {} velocities", grads.len(), velocity.len()),
        ));
    }
    for ((w, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let d = g as f64 + cfg.weight_decay * *w as f64;
        let nv = cfg.momentum * *v as f64 + d;
        *v = nv as f32;
        *w = (*w as f64 - cfg.lr * nv) as f32;
    }
    Ok(())
}
