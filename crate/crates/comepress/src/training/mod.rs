//! Pretraining and feature-distillation post-training.

pub mod distill;
pub mod optim;
pub mod pretrain;

pub use distill::{distill_mp, distill_sp, feature_kl, DistillConfig, DistillMode, KlDirection};
pub use optim::{adamw_step, clip_global_norm, cosine_lr, AdamWParams, OptimizerState};
pub use pretrain::{pretrain, PretrainConfig};

use serde::{Deserialize, Serialize};

/// One logged training step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<LossPoint>,
}

impl LossCurve {
    pub fn push(&mut self, step: usize, loss: f64, lr: f64) {
        self.points.push(LossPoint { step, loss, lr });
    }

    /// Mean loss over the first `k` points.
    pub fn head_mean(&self, k: usize) -> f64 {
        let k = k.min(self.points.len()).max(1);
        self.points[..k].iter().map(|p| p.loss).sum::<f64>() / k as f64
    }

    /// Mean loss over the last `k` points.
    pub fn tail_mean(&self, k: usize) -> f64 {
        let n = self.points.len();
        let k = k.min(n).max(1);
        self.points[n - k..].iter().map(|p| p.loss).sum::<f64>() / k as f64
    }
}
