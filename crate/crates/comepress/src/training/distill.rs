//! Feature-level distillation of a pruned student against its teacher.
//!
//! The mapping produced by pruning pairs teacher layer a with student layer
//! b. Per token, both hidden states are turned into distributions with a
//! softmax over the hidden axis and compared with KL divergence; the loss is
//! averaged over tokens (and over pairs in single-process mode). Only mapped
//! student layers receive updates; the teacher is never touched.

use super::optim::{adamw_step, clip_global_norm, AdamWParams, OptimizerState};
use super::pretrain::BatchSampler;
use super::LossCurve;
use crate::error::{Error, Result};
use crate::eval::windows;
use crate::merging::LayerMapping;
use crate::model::{CaptureSpec, ToyModel};
use crate::rng::CounterRng;
use crate::tensor::nn;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    Forward,
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    /// One mapped layer at a time, shallow to deep, each with its own rate.
    Mp,
    /// All mapped layers jointly under the pair-averaged loss.
    Sp,
}

/// Learning-rate ladder for multi-process runs, shallow to deep.
pub const MP_LR_LADDER: [f64; 7] = [5e-4, 2.5e-4, 1e-4, 7.5e-5, 5e-5, 2.5e-5, 1e-5];

#[derive(Debug, Clone)]
pub struct DistillConfig {
    pub mode: DistillMode,
    pub mapping: LayerMapping,
    /// Single-process rate; also the fallback when no ladder is given.
    pub lr: f64,
    /// Per-pair rates for mp mode; must match the mapping length when set.
    pub per_pair_lr: Option<Vec<f64>>,
    /// Steps per pair (mp) or total steps (sp).
    pub steps: usize,
    pub batch: usize,
    pub seq: usize,
    pub kl: KlDirection,
    pub seed: u64,
    pub weight_decay: f64,
    pub clip: f64,
}

impl DistillConfig {
    pub fn new(mode: DistillMode, mapping: LayerMapping) -> Self {
        DistillConfig {
            mode,
            mapping,
            lr: 1e-5,
            per_pair_lr: None,
            steps: 1000,
            batch: 16,
            seq: 128,
            kl: KlDirection::Forward,
            seed: 42,
            weight_decay: 1e-2,
            clip: 1.0,
        }
    }

    /// Ladder rates for this mapping: explicit list, or the preset truncated
    /// (and padded with its last entry) to the pair count.
    fn pair_rates(&self) -> Result<Vec<f64>> {
        let n = self.mapping.len();
        match &self.per_pair_lr {
            Some(list) => {
                if list.len() != n {
                    return Err(Error::Config(format!(
                        "{} per-pair rates for {} mapping pairs",
                        list.len(),
                        n
                    )));
                }
                Ok(list.clone())
            }
            None => Ok((0..n)
                .map(|i| MP_LR_LADDER[i.min(MP_LR_LADDER.len() - 1)])
                .collect()),
        }
    }

    fn validate(&self, teacher: &ToyModel<f32>, student: &ToyModel<f32>) -> Result<()> {
        if self.mapping.is_empty() {
            return Err(Error::Config("distillation needs a non-empty layer mapping".into()));
        }
        self.mapping.validate()?;
        for &(a, b) in &self.mapping.pairs {
            if a >= teacher.n_layers() {
                return Err(Error::Contract(format!(
                    "teacher layer {a} out of range {}",
                    teacher.n_layers()
                )));
            }
            if b >= student.n_layers() {
                return Err(Error::Contract(format!(
                    "student layer {b} out of range {}",
                    student.n_layers()
                )));
            }
        }
        Ok(())
    }
}

/// Token-wise KL between hidden states after a softmax over the hidden axis.
/// Forward: KL(teacher || student); symmetric: the mean of both directions.
pub fn feature_kl<T: Scalar>(
    teacher_h: &Tensor<T>,
    student_h: &Tensor<T>,
    direction: KlDirection,
) -> Result<f64> {
    if teacher_h.shape() != student_h.shape() {
        return Err(Error::Dimension(format!(
            "feature shapes differ: {:?} vs {:?}",
            teacher_h.shape(),
            student_h.shape()
        )));
    }
    let axis = teacher_h.ndim() - 1;
    let p = nn::softmax_axis(teacher_h, axis)?;
    let q = nn::softmax_axis(student_h, axis)?;
    let fwd = nn::kl_div(&p, &q)?.as_f64();
    Ok(match direction {
        KlDirection::Forward => fwd,
        KlDirection::Symmetric => 0.5 * (fwd + nn::kl_div(&q, &p)?.as_f64()),
    })
}

/// Tape version of `feature_kl` for one pair; the teacher side is a constant.
fn pair_loss_on_tape(
    tape: &mut Tape<f32>,
    teacher_h: &Tensor<f32>,
    student_h: Var,
    kl: KlDirection,
) -> Result<Var> {
    let d = teacher_h.last_dim();
    let rows = teacher_h.rows_2d();
    let p_const = nn::softmax_axis(teacher_h, teacher_h.ndim() - 1)?.reshape(&[rows, d])?;
    let p = tape.leaf(p_const);
    let s2 = tape.reshape(student_h, &[rows, d])?;
    let q = tape.softmax(s2, 1)?;
    let fwd = tape.kl_div(p, q)?;
    Ok(match kl {
        KlDirection::Forward => fwd,
        KlDirection::Symmetric => {
            let rev = tape.kl_div(q, p)?;
            let sum = tape.add(fwd, rev)?;
            tape.scale(sum, 0.5)
        }
    })
}

/// Teacher hidden states for the mapped layers on one batch.
fn teacher_features(
    teacher: &ToyModel<f32>,
    batch: &crate::model::TokenBatch,
    pairs: &[(usize, usize)],
) -> Result<Vec<Tensor<f32>>> {
    let (_, trace) = teacher.forward(batch, &CaptureSpec::hidden_only())?;
    Ok(pairs.iter().map(|&(a, _)| trace.hidden[a + 1].clone()).collect())
}

struct LayerTrainer {
    state: OptimizerState<f32>,
    hp: AdamWParams,
}

/// Apply grads to exactly the given student layers.
fn update_layers(
    student: &mut ToyModel<f32>,
    layer_ids: &[usize],
    grads: Vec<Vec<Tensor<f32>>>,
    trainer: &mut LayerTrainer,
    lr: f64,
    clip: f64,
) -> Result<()> {
    let mut flat_grads: Vec<Tensor<f32>> = grads.into_iter().flatten().collect();
    clip_global_norm(&mut flat_grads, clip);
    let mut params: Vec<&mut Tensor<f32>> = Vec::with_capacity(flat_grads.len());
    // Disjoint index access; layer_ids are strictly increasing.
    let mut rest: &mut [crate::model::DecoderLayerWeights<f32>] = &mut student.layers;
    let mut consumed = 0usize;
    for &b in layer_ids {
        let (_, tail) = rest.split_at_mut(b - consumed);
        let (layer, tail) = tail.split_first_mut().expect("validated index");
        params.extend(layer.tensors_mut());
        rest = tail;
        consumed = b + 1;
    }
    let grefs: Vec<&Tensor<f32>> = flat_grads.iter().collect();
    adamw_step(&mut params, &grefs, &mut trainer.state, &trainer.hp, lr)
}

/// Single-process distillation: every mapped layer trains jointly under the
/// mean per-pair KL. Returns the loss curve.
pub fn distill_sp(
    teacher: &ToyModel<f32>,
    student: &mut ToyModel<f32>,
    cfg: &DistillConfig,
    train_bytes: &[u8],
) -> Result<LossCurve> {
    cfg.validate(teacher, student)?;
    let pairs = cfg.mapping.pairs.clone();
    let layer_ids: Vec<usize> = pairs.iter().map(|&(_, b)| b).collect();
    let deepest = *layer_ids.last().expect("non-empty mapping");
    let ws = windows(train_bytes, cfg.seq, cfg.seq)?;
    let rng = CounterRng::new(cfg.seed).derive(0xd157);
    let mut sampler = BatchSampler::new(&ws, cfg.batch, rng);
    let mut trainer = LayerTrainer {
        state: layer_state(student, &layer_ids),
        hp: AdamWParams { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWParams::default() },
    };
    let mut curve = LossCurve::default();
    for step in 0..cfg.steps {
        let (batch, _) = sampler.next_batch()?;
        let teacher_h = teacher_features(teacher, &batch, &pairs)?;
        let mut tape = Tape::new();
        let fwd = student.forward_tape(&mut tape, &batch, Some(deepest), false)?;
        let mut total: Option<Var> = None;
        for (t_h, &(_, b)) in teacher_h.iter().zip(&pairs) {
            let l = pair_loss_on_tape(&mut tape, t_h, fwd.hidden[b + 1], cfg.kl)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, l)?,
                None => l,
            });
        }
        let loss_var = tape.scale(total.expect("at least one pair"), 1.0 / pairs.len() as f64);
        let loss = tape.value(loss_var).scalar_value() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("distill loss {loss} at step {step}")));
        }
        let mut grads = tape.backward(loss_var)?;
        let gs: Vec<Vec<Tensor<f32>>> = layer_ids
            .iter()
            .map(|&b| {
                let lv = &fwd.params.layers[b];
                lv.vars()
                    .iter()
                    .zip(student.layers[b].tensors())
                    .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
                    .collect()
            })
            .collect();
        update_layers(student, &layer_ids, gs, &mut trainer, cfg.lr, cfg.clip)?;
        curve.push(step, loss, cfg.lr);
    }
    Ok(curve)
}

/// Multi-process distillation: pairs train one at a time, shallow to deep,
/// each against only its own teacher feature. Batches reshuffle under a
/// per-pair derived seed.
pub fn distill_mp(
    teacher: &ToyModel<f32>,
    student: &mut ToyModel<f32>,
    cfg: &DistillConfig,
    train_bytes: &[u8],
) -> Result<LossCurve> {
    cfg.validate(teacher, student)?;
    let rates = cfg.pair_rates()?;
    let ws = windows(train_bytes, cfg.seq, cfg.seq)?;
    let mut curve = LossCurve::default();
    let mut global_step = 0usize;
    let pairs = cfg.mapping.pairs.clone();
    for (k, (&(a, b), &lr)) in pairs.iter().zip(&rates).enumerate() {
        let rng = CounterRng::new(cfg.seed).derive(0xd157 + 1 + k as u64);
        let mut sampler = BatchSampler::new(&ws, cfg.batch, rng);
        let mut trainer = LayerTrainer {
            state: layer_state(student, &[b]),
            hp: AdamWParams { lr, weight_decay: cfg.weight_decay, ..AdamWParams::default() },
        };
        for _ in 0..cfg.steps {
            let (batch, _) = sampler.next_batch()?;
            let teacher_h = teacher_features(teacher, &batch, &[(a, b)])?;
            let mut tape = Tape::new();
            let fwd = student.forward_tape(&mut tape, &batch, Some(b), false)?;
            let loss_var = pair_loss_on_tape(&mut tape, &teacher_h[0], fwd.hidden[b + 1], cfg.kl)?;
            let loss = tape.value(loss_var).scalar_value() as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "distill loss {loss} at pair {k} step {global_step}"
                )));
            }
            let mut grads = tape.backward(loss_var)?;
            let lv = &fwd.params.layers[b];
            let gs: Vec<Tensor<f32>> = lv
                .vars()
                .iter()
                .zip(student.layers[b].tensors())
                .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            update_layers(student, &[b], vec![gs], &mut trainer, lr, cfg.clip)?;
            curve.push(global_step, loss, lr);
            global_step += 1;
        }
    }
    Ok(curve)
}

fn layer_state(student: &ToyModel<f32>, layer_ids: &[usize]) -> OptimizerState<f32> {
    let tensors: Vec<&Tensor<f32>> = layer_ids
        .iter()
        .flat_map(|&b| student.layers[b].tensors().into_iter())
        .collect();
    OptimizerState::new(&tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg_model(n_layers: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 258,
            d_model: 16,
            n_heads: 2,
            d_head: 8,
            d_ff: 32,
            n_layers,
            max_seq: 32,
            rms_eps: 1e-5,
            rope_base: 10000.0,
        }
    }

    fn corpus() -> Vec<u8> {
        let text = b"pack my box with five dozen liquor jugs. ";
        text.iter().cycle().take(6000).cloned().collect()
    }

    fn base_config(mode: DistillMode, pairs: Vec<(usize, usize)>) -> DistillConfig {
        let mut c = DistillConfig::new(mode, LayerMapping { pairs });
        c.batch = 2;
        c.seq = 16;
        c.steps = 3;
        c
    }

    #[test]
    fn feature_kl_zero_on_equal_inputs() {
        let mut rng = CounterRng::new(501);
        let h = Tensor::<f64>::randn(&[2, 3, 8], 1.0, &mut rng);
        for dir in [KlDirection::Forward, KlDirection::Symmetric] {
            let kl = feature_kl(&h, &h, dir).unwrap();
            assert!(kl.abs() < 1e-9);
        }
    }

    #[test]
    fn feature_kl_closed_form_case() {
        // d = 2 per-token distribution; teacher spiked, student uniform.
        let t = Tensor::from_vec(vec![1, 1, 2], vec![10.0f64, 0.0]).unwrap();
        let s = Tensor::<f64>::zeros(&[1, 1, 2]);
        let kl = feature_kl(&t, &s, KlDirection::Forward).unwrap();
        let p1 = (10.0f64).exp() / ((10.0f64).exp() + 1.0);
        let expected = p1 * (p1 / 0.5).ln() + (1.0 - p1) * ((1.0 - p1) / 0.5).ln();
        assert!((kl - expected).abs() < 1e-12, "{kl} vs {expected}");
    }

    #[test]
    fn feature_kl_nonnegative_randomized() {
        let mut rng = CounterRng::new(503);
        for _ in 0..50 {
            let a = Tensor::<f64>::randn(&[2, 4, 8], 1.5, &mut rng);
            let b = Tensor::<f64>::randn(&[2, 4, 8], 1.5, &mut rng);
            for dir in [KlDirection::Forward, KlDirection::Symmetric] {
                assert!(feature_kl(&a, &b, dir).unwrap() >= 0.0);
            }
        }
    }

    #[test]
    fn zero_steps_leave_student_unchanged() {
        let mut rng = CounterRng::new(505);
        let teacher = ToyModel::<f32>::init(cfg_model(3), &mut rng).unwrap();
        let mut student = teacher.without_layer(2).unwrap();
        let before = student.clone();
        let mut cfg = base_config(DistillMode::Mp, vec![(2, 1)]);
        cfg.steps = 0;
        distill_mp(&teacher, &mut student, &cfg, &corpus()).unwrap();
        assert_eq!(student, before);
    }

    #[test]
    fn equivalent_student_layer_starts_near_zero_loss() {
        // The student is a bit-copy of the teacher, so the mapped pair's
        // features coincide and the loss starts at ~0 and must stay there.
        // Weight decay is off: it would drift the copy away from the teacher
        // even at zero gradient.
        let mut rng = CounterRng::new(507);
        let teacher = ToyModel::<f32>::init(cfg_model(3), &mut rng).unwrap();
        let mut student = teacher.clone();
        let mut cfg = base_config(DistillMode::Mp, vec![(1, 1)]);
        cfg.steps = 5;
        cfg.weight_decay = 0.0;
        cfg.per_pair_lr = Some(vec![1e-7]);
        let curve = distill_mp(&teacher, &mut student, &cfg, &corpus()).unwrap();
        assert!(curve.points[0].loss < 1e-12, "initial loss {}", curve.points[0].loss);
        for p in &curve.points {
            assert!(p.loss < 1e-9, "loss drifted to {}", p.loss);
        }
    }

    #[test]
    fn non_mapped_tensors_stay_byte_identical() {
        let mut rng = CounterRng::new(509);
        let teacher = ToyModel::<f32>::init(cfg_model(4), &mut rng).unwrap();
        let mut student = teacher.without_layer(2).unwrap();
        let before = student.clone();
        let cfg = base_config(DistillMode::Sp, vec![(2, 1), (3, 2)]);
        distill_sp(&teacher, &mut student, &cfg, &corpus()).unwrap();
        assert_eq!(student.embed, before.embed);
        assert_eq!(student.unembed, before.unembed);
        assert_eq!(student.final_norm_gamma, before.final_norm_gamma);
        assert_eq!(student.layers[0], before.layers[0]);
        assert_ne!(student.layers[1], before.layers[1]);
        assert_ne!(student.layers[2], before.layers[2]);
    }

    #[test]
    fn sp_gradient_reaches_every_mapped_layer() {
        let mut rng = CounterRng::new(511);
        let teacher = ToyModel::<f32>::init(cfg_model(4), &mut rng).unwrap();
        let mut student = teacher.without_layer(1).unwrap();
        let before = student.clone();
        let mut cfg = base_config(DistillMode::Sp, vec![(1, 0), (3, 2)]);
        cfg.steps = 1;
        cfg.lr = 1e-3;
        distill_sp(&teacher, &mut student, &cfg, &corpus()).unwrap();
        for &b in &[0usize, 2] {
            assert_ne!(student.layers[b], before.layers[b], "layer {b} did not move");
        }
    }

    #[test]
    fn sp_with_one_pair_degenerates_to_mp() {
        // A corpus with exactly one window and batch 1 makes every batch
        // identical, so the two modes see the same data and must produce the
        // same per-step losses bit for bit.
        let mut rng = CounterRng::new(513);
        let teacher = ToyModel::<f32>::init(cfg_model(3), &mut rng).unwrap();
        let student0 = teacher.without_layer(2).unwrap();
        let tiny: Vec<u8> = corpus()[..16].to_vec();
        let mut cfg_sp = base_config(DistillMode::Sp, vec![(2, 1)]);
        cfg_sp.batch = 1;
        cfg_sp.steps = 4;
        let mut cfg_mp = base_config(DistillMode::Mp, vec![(2, 1)]);
        cfg_mp.batch = 1;
        cfg_mp.steps = 4;
        cfg_mp.per_pair_lr = Some(vec![cfg_sp.lr]);
        let mut s1 = student0.clone();
        let curve_sp = distill_sp(&teacher, &mut s1, &cfg_sp, &tiny).unwrap();
        let mut s2 = student0.clone();
        let curve_mp = distill_mp(&teacher, &mut s2, &cfg_mp, &tiny).unwrap();
        for (a, b) in curve_sp.points.iter().zip(&curve_mp.points) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }
        assert_eq!(s1, s2);
    }

    #[test]
    fn teacher_is_unchanged_by_distillation() {
        let mut rng = CounterRng::new(517);
        let teacher = ToyModel::<f32>::init(cfg_model(3), &mut rng).unwrap();
        let reference = teacher.clone();
        let mut student = teacher.without_layer(2).unwrap();
        let cfg = base_config(DistillMode::Sp, vec![(2, 1)]);
        distill_sp(&teacher, &mut student, &cfg, &corpus()).unwrap();
        assert_eq!(teacher, reference);
    }

    #[test]
    fn deterministic_replay() {
        let mut rng = CounterRng::new(519);
        let teacher = ToyModel::<f32>::init(cfg_model(3), &mut rng).unwrap();
        let cfg = base_config(DistillMode::Sp, vec![(2, 1)]);
        let mut a = teacher.without_layer(2).unwrap();
        let mut b = a.clone();
        distill_sp(&teacher, &mut a, &cfg, &corpus()).unwrap();
        distill_sp(&teacher, &mut b, &cfg, &corpus()).unwrap();
        assert_eq!(a, b);
    }
}
