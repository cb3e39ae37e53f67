//! Next-token pretraining of the toy model on the byte corpus.

use super::optim::{adamw_step, clip_global_norm, cosine_lr, AdamWParams, OptimizerState};
use super::LossCurve;
use crate::error::{Error, Result};
use crate::eval::{windows, Window};
use crate::model::{ModelVars, TokenBatch, ToyModel};
use crate::rng::CounterRng;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seq: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1200,
            batch: 8,
            seq: 128,
            lr: 3e-3,
            weight_decay: 1e-2,
            clip: 1.0,
            seed: 42,
        }
    }
}

/// Epoch-shuffled window sampler. Each epoch reshuffles with a derived
/// stream, so the batch sequence is a pure function of (seed, step).
pub struct BatchSampler<'a> {
    windows: &'a [Window],
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    rng: CounterRng,
    batch: usize,
}

impl<'a> BatchSampler<'a> {
    pub fn new(windows: &'a [Window], batch: usize, rng: CounterRng) -> Self {
        let mut s = BatchSampler {
            windows,
            order: (0..windows.len()).collect(),
            cursor: 0,
            epoch: 0,
            rng,
            batch,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        let mut r = self.rng.derive(self.epoch);
        r.shuffle(&mut self.order);
        self.cursor = 0;
    }

    /// Next batch of (inputs, targets).
    pub fn next_batch(&mut self) -> Result<(TokenBatch, Vec<u32>)> {
        if self.windows.is_empty() {
            return Err(Error::Contract("no training windows".into()));
        }
        let seq = self.windows[0].seq();
        let mut ids = Vec::with_capacity(self.batch * seq);
        let mut targets = Vec::with_capacity(self.batch * seq);
        for _ in 0..self.batch {
            if self.cursor >= self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            let w = &self.windows[self.order[self.cursor]];
            self.cursor += 1;
            ids.extend_from_slice(&w.input);
            targets.extend_from_slice(&w.targets);
        }
        Ok((TokenBatch::new(self.batch, seq, ids)?, targets))
    }
}

/// Mutable references to every parameter tensor, in the checkpoint order.
pub fn param_slots(model: &mut ToyModel<f32>) -> Vec<&mut Tensor<f32>> {
    let mut out: Vec<&mut Tensor<f32>> = vec![&mut model.embed];
    for layer in model.layers.iter_mut() {
        out.extend(layer.tensors_mut());
    }
    out.push(&mut model.final_norm_gamma);
    out.push(&mut model.unembed);
    out
}

/// Tape vars in the same order as `param_slots`.
pub fn param_vars(vars: &ModelVars) -> Vec<Var> {
    let mut out = vec![vars.embed];
    for lv in &vars.layers {
        out.extend(lv.vars());
    }
    out.push(vars.final_norm_gamma);
    out.push(vars.unembed);
    out
}

/// Train in place; returns the loss curve. A non-finite loss aborts.
pub fn pretrain(
    model: &mut ToyModel<f32>,
    train_bytes: &[u8],
    cfg: &PretrainConfig,
) -> Result<LossCurve> {
    let ws = windows(train_bytes, cfg.seq, cfg.seq)?;
    let rng = CounterRng::new(cfg.seed).derive(0x7a41);
    let mut sampler = BatchSampler::new(&ws, cfg.batch, rng);
    let hp = AdamWParams { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWParams::default() };
    let mut state: Option<OptimizerState<f32>> = None;
    let mut curve = LossCurve::default();
    for step in 0..cfg.steps {
        let (batch, targets) = sampler.next_batch()?;
        let mut tape = Tape::new();
        let fwd = model.forward_tape(&mut tape, &batch, None, true)?;
        let loss_var = tape.cross_entropy(fwd.logits.expect("logits requested"), &targets)?;
        let loss = tape.value(loss_var).scalar_value() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("pretrain loss {loss} at step {step}")));
        }
        let vars = param_vars(&fwd.params);
        let mut grads = tape.backward(loss_var)?;
        let mut slots = param_slots(model);
        let mut gs: Vec<Tensor<f32>> = Vec::with_capacity(vars.len());
        for (v, slot) in vars.iter().zip(&slots) {
            gs.push(grads.take(*v).unwrap_or_else(|| Tensor::zeros(slot.shape())));
        }
        clip_global_norm(&mut gs, cfg.clip);
        let lr_now = cosine_lr(step, cfg.steps, cfg.lr);
        let grefs: Vec<&Tensor<f32>> = gs.iter().collect();
        let st = state.get_or_insert_with(|| {
            OptimizerState::new(&slots.iter().map(|p| &**p).collect::<Vec<_>>())
        });
        adamw_step(&mut slots, &grefs, st, &hp, lr_now)?;
        curve.push(step, loss, lr_now);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 258,
            d_model: 16,
            n_heads: 2,
            d_head: 8,
            d_ff: 32,
            n_layers: 2,
            max_seq: 32,
            rms_eps: 1e-5,
            rope_base: 10000.0,
        }
    }

    fn train_bytes() -> Vec<u8> {
        let text = b"the quick brown fox jumps over the lazy dog. ";
        text.iter().cycle().take(4000).cloned().collect()
    }

    #[test]
    fn zero_lr_leaves_weights_unchanged() {
        let mut rng = CounterRng::new(401);
        let mut model = ToyModel::<f32>::init(tiny_cfg(), &mut rng).unwrap();
        let before = model.clone();
        let cfg = PretrainConfig { steps: 1, batch: 2, seq: 16, lr: 0.0, ..Default::default() };
        pretrain(&mut model, &train_bytes(), &cfg).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn initial_loss_is_near_log_vocab() {
        let mut rng = CounterRng::new(403);
        let mut model = ToyModel::<f32>::init(tiny_cfg(), &mut rng).unwrap();
        let cfg = PretrainConfig { steps: 1, batch: 4, seq: 16, lr: 0.0, ..Default::default() };
        let curve = pretrain(&mut model, &train_bytes(), &cfg).unwrap();
        let expected = (258.0f64).ln();
        assert!((curve.points[0].loss - expected).abs() < 0.3, "loss {}", curve.points[0].loss);
    }

    #[test]
    fn short_run_reduces_loss_and_replays_deterministically() {
        let mut rng = CounterRng::new(405);
        let mut a = ToyModel::<f32>::init(tiny_cfg(), &mut rng).unwrap();
        let mut b = a.clone();
        let cfg = PretrainConfig { steps: 30, batch: 4, seq: 32, lr: 2e-3, ..Default::default() };
        let ca = pretrain(&mut a, &train_bytes(), &cfg).unwrap();
        let cb = pretrain(&mut b, &train_bytes(), &cfg).unwrap();
        assert_eq!(a, b, "same seed must give bit-identical weights");
        assert_eq!(ca.points.len(), cb.points.len());
        for (x, y) in ca.points.iter().zip(&cb.points) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
        }
        assert!(ca.tail_mean(5) < ca.head_mean(5), "loss should drop");
    }
}
